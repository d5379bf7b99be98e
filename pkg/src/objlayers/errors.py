"""Exception hierarchy shared across the package."""


class ObjLayersError(Exception):
    """Base class for all package errors."""


class StructuralError(ObjLayersError):
    """Array shapes or layer counts do not line up."""


class ValidationError(ObjLayersError, ValueError):
    """An input value is out of its documented domain."""


class GenerationError(ObjLayersError):
    """Procedural scene generation could not satisfy its constraints."""


class PersistenceError(ObjLayersError):
    """Reading or writing files on disk failed."""


class NumericalError(ObjLayersError, FloatingPointError):
    """A computation produced non-finite values."""


class TrainingError(NumericalError):
    """Training diverged."""


class ContractViolation(ObjLayersError):
    """A frozen component was about to be modified."""


class CapabilityError(ObjLayersError):
    """The requested problem size exceeds what an exact method supports."""


class ConfigError(ObjLayersError):
    """A configuration file or flag could not be resolved."""
