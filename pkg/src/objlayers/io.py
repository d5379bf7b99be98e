"""PNG and JSON persistence for layer stacks, composites and label maps."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any

import numpy as np
from PIL import Image

from .compositor import LayerImage, LayerStack
from .errors import PersistenceError, StructuralError

STACK_MANIFEST = "stack.json"


def to_uint8(x: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(x) * 255.0), 0, 255).astype(np.uint8)


def write_json(path: Path, payload: Any) -> None:
    try:
        Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True, ensure_ascii=False) + "\n", encoding="utf-8")
    except OSError as exc:
        raise PersistenceError(f"cannot write {path}: {exc}") from exc


def read_json(path: Path) -> Any:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise PersistenceError(f"cannot read {path}: {exc}") from exc


def _save_png(path: Path, array: np.ndarray, mode: str) -> None:
    try:
        Image.fromarray(array, mode=mode).save(path)
    except OSError as exc:
        raise PersistenceError(f"cannot write {path}: {exc}") from exc


def _load_png(path: Path) -> Image.Image:
    try:
        img = Image.open(path)
        img.load()
        return img
    except OSError as exc:
        raise PersistenceError(f"cannot read {path}: {exc}") from exc


def write_stack(stack: LayerStack, directory: Path) -> None:
    """One RGBA PNG per layer plus ``stack.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    names = [f"layer_{i + 1:03d}.png" for i in range(len(stack))]
    for name, layer in zip(names, stack):
        rgba = np.concatenate([to_uint8(layer.color), to_uint8(layer.alpha)[..., None]], axis=-1)
        _save_png(directory / name, rgba, "RGBA")
    h, w = stack.shape
    write_json(directory / STACK_MANIFEST,
               {"n_layers": len(stack), "height": h, "width": w, "layers": names, "background_index": 1})


def read_stack(directory: Path) -> LayerStack:
    directory = Path(directory)
    meta = read_json(directory / STACK_MANIFEST)
    layers = []
    for name in meta["layers"]:
        rgba = np.asarray(_load_png(directory / name).convert("RGBA"), dtype=np.float64) / 255.0
        layers.append(LayerImage(rgba[..., :3], rgba[..., 3]))
    stack = LayerStack(tuple(layers))
    if len(stack) != meta["n_layers"] or stack.shape != (meta["height"], meta["width"]):
        raise StructuralError(f"{directory}: manifest disagrees with layer files")
    if meta.get("background_index", 1) != 1:
        raise StructuralError(f"{directory}: background must be the first layer")
    return stack


def write_image(path: Path, image: np.ndarray) -> None:
    _save_png(Path(path), to_uint8(image), "RGB")


def read_image(path: Path) -> np.ndarray:
    return np.asarray(_load_png(Path(path)).convert("RGB"), dtype=np.float64) / 255.0


def write_labels(path: Path, labels: np.ndarray) -> None:
    """Label maps are stored as raw gray values (label k -> gray level k)."""
    _save_png(Path(path), np.asarray(labels).astype(np.uint8), "L")


def read_labels(path: Path) -> np.ndarray:
    return np.asarray(_load_png(Path(path)).convert("L"), dtype=np.int64)
