"""Run configuration: INI-style ``key = value`` files with sections.

Resolution order is flags > file > defaults. Unknown sections or keys are
rejected so typos never silently fall back to a default.
"""

from __future__ import annotations

import configparser
import copy
from pathlib import Path
from typing import Any, Mapping

from .errors import ConfigError

DEFAULTS: dict[str, dict[str, Any]] = {
    "global": {"seed": 0, "jobs": 0},
    "scenegen": {
        "n_scenes": 100,
        "min_objects": 2,
        "max_objects": 3,
        "size": 32,
        "n_layers": 5,
        "n_textures": 1,
        "holdout": -1,  # -1: one ninth of the scenes
    },
    "train": {
        "steps": 0,  # 0: derive from epochs
        "epochs": 100,
        "lr": 1e-4,
        "batch_size": 8,
        "base_batch_size": 64,
        "cond_dropout": 0.1,
        "T": 1000,
        "beta_start": 1e-4,
        "beta_end": 0.02,
        "cosine": False,
        "snr_gamma": 0.0,  # 0: plain objective; > 0: min-SNR weighting
    },
    "sample": {
        "steps": 30,
        "w": 1e4,
        "lambda": 1e-7,
        "cfg": 3.0,
        "period": 5,
        "exact_grad": False,
        "no_guidance": False,
        "n_seeds": 1,
        "erase_threshold": 0.01,
        "empty_threshold": 0.001,
        "sharpness": 50.0,
        "split": "val",
        "limit": 0,
    },
    "eval": {},
}


class RunConfig(dict):
    """Mapping of section -> {key: value} with typed values."""

    def get_value(self, section: str, key: str) -> Any:
        return self[section][key]

    def to_ini(self) -> str:
        lines = []
        for section in sorted(self):
            lines.append(f"[{section}]")
            for key in sorted(self[section]):
                lines.append(f"{key} = {_format(self[section][key])}")
            lines.append("")
        return "\n".join(lines)

    def to_dict(self) -> dict:
        return {s: dict(v) for s, v in self.items()}


def _format(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    return repr(value) if isinstance(value, float) else str(value)


_BOOLS = {"1": True, "true": True, "yes": True, "on": True, "0": False, "false": False, "no": False, "off": False}


def coerce(section: str, key: str, raw: Any) -> Any:
    default = DEFAULTS[section][key]
    if not isinstance(raw, str):
        return raw
    text = raw.strip()
    try:
        if isinstance(default, bool):
            return _BOOLS[text.lower()]
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"[{section}] {key}: cannot parse {text!r} as {type(default).__name__}") from exc
    return text


_TOP = "\x00top"  # keys before the first header


def parse_config_text(text: str, source: str = "<config>") -> dict[str, dict[str, Any]]:
    """Parse config text. Keys before the first section header belong to ``[global]``."""
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string(f"[{_TOP}]\n" + text, source=source)
    except configparser.ParsingError as exc:
        lineno, line = exc.errors[0]
        raise ConfigError(f"{source}: line {lineno - 1}: cannot parse {line!r}") from exc
    except configparser.DuplicateOptionError as exc:
        raise ConfigError(f"{source}: line {exc.lineno - 1}: duplicate key {exc.option!r}") from exc
    except configparser.DuplicateSectionError as exc:
        raise ConfigError(f"{source}: line {(exc.lineno or 1) - 1}: duplicate section {exc.section!r}") from exc
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from exc
    out: dict[str, dict[str, Any]] = {}
    for name in parser.sections():
        section = "global" if name == _TOP else name
        if section not in DEFAULTS:
            raise ConfigError(f"{source}: unknown section [{section}]")
        for key, raw in parser.items(name):
            if key not in DEFAULTS[section]:
                raise ConfigError(f"{source}: unknown key {key!r} in [{section}]")
            if key in out.get(section, {}):
                raise ConfigError(f"{source}: duplicate key {key!r} in [{section}]")
            out.setdefault(section, {})[key] = coerce(section, key, raw)
    return out


def load_config(path: str | Path | None = None, overrides: Mapping[tuple[str, str], Any] | None = None) -> RunConfig:
    """Defaults, then the file at ``path`` (if any), then ``overrides`` keyed by (section, key)."""
    config = RunConfig(copy.deepcopy(DEFAULTS))
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        for section, values in parse_config_text(text, str(path)).items():
            config[section].update(values)
    for (section, key), value in (overrides or {}).items():
        if section not in DEFAULTS or key not in DEFAULTS[section]:
            raise ConfigError(f"unknown key {key!r} in [{section}]")
        if value is not None:
            config[section][key] = coerce(section, key, value)
    return config
