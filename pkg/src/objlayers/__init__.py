"""Occlusion-ordered object layers inferred by coupled, guided diffusion denoisers."""

from .compositor import (
    LayerImage,
    LayerStack,
    apply_shadows,
    composite,
    panoptic_project,
    soft_mask,
    visibility_fraction,
)

__all__ = [
    "LayerImage",
    "LayerStack",
    "apply_shadows",
    "composite",
    "panoptic_project",
    "soft_mask",
    "visibility_fraction",
]
__version__ = "0.1.0"
