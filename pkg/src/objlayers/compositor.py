"""Layer compositing algebra, shadows, soft masks and panoptic projection.

Layer stacks are ordered back to front: index 0 is the background and the
last index is the nearest object. Panoptic labels are 1-based layer numbers
(python index + 1) for foreground layers and 0 for the background.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np
import torch

from .errors import StructuralError, ValidationError

DELTA = 1e-7  # (1 + DELTA) ** -N stays within 1e-6 for N <= 8
EMPTY_THRESHOLD = 1e-3
BINARY_THRESHOLD = 0.5
DEFAULT_SHARPNESS = 50.0


@dataclass(frozen=True)
class LayerImage:
    """One RGBA layer. ``color`` is (H, W, 3) and ``alpha`` is (H, W), both in [0, 1]."""

    color: np.ndarray
    alpha: np.ndarray

    def __post_init__(self) -> None:
        color = np.asarray(self.color, dtype=np.float64)
        alpha = np.asarray(self.alpha, dtype=np.float64)
        if color.ndim != 3 or color.shape[-1] != 3:
            raise StructuralError(f"color must be (H, W, 3), got {color.shape}")
        if alpha.shape != color.shape[:2]:
            raise StructuralError(f"alpha shape {alpha.shape} does not match color {color.shape[:2]}")
        if not (np.isfinite(color).all() and np.isfinite(alpha).all()):
            raise ValidationError("layer contains non-finite values")
        if color.min(initial=0.0) < 0 or color.max(initial=0.0) > 1 or alpha.min(initial=0.0) < 0 or alpha.max(initial=0.0) > 1:
            raise ValidationError("layer values must lie in [0, 1]")
        object.__setattr__(self, "color", color)
        object.__setattr__(self, "alpha", alpha)

    @property
    def shape(self) -> tuple[int, int]:
        return self.alpha.shape

    def coverage(self) -> float:
        """Fraction of pixels with nonzero alpha."""
        return float((self.alpha > 0).mean())

    def is_empty(self, threshold: float = EMPTY_THRESHOLD) -> bool:
        return self.coverage() < threshold

    def binarized(self) -> LayerImage:
        return LayerImage(self.color, (self.alpha >= BINARY_THRESHOLD).astype(np.float64))

    def on_gray(self) -> np.ndarray:
        """Color pre-composited over a 0.5 gray canvas."""
        a = self.alpha[..., None]
        return self.color * a + 0.5 * (1.0 - a)

    @classmethod
    def empty(cls, height: int, width: int) -> LayerImage:
        return cls(np.full((height, width, 3), 0.5), np.zeros((height, width)))


@dataclass(frozen=True)
class LayerStack:
    """Back-to-front sequence of layers; ``layers[0]`` is the background."""

    layers: tuple[LayerImage, ...]

    def __post_init__(self) -> None:
        layers = tuple(self.layers)
        if not layers:
            raise StructuralError("a layer stack needs at least one layer")
        shape = layers[0].shape
        for i, layer in enumerate(layers):
            if layer.shape != shape:
                raise StructuralError(f"layer {i} has shape {layer.shape}, expected {shape}")
        object.__setattr__(self, "layers", layers)

    def __len__(self) -> int:
        return len(self.layers)

    def __getitem__(self, i: int) -> LayerImage:
        return self.layers[i]

    def __iter__(self):
        return iter(self.layers)

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    @property
    def shape(self) -> tuple[int, int]:
        return self.layers[0].shape

    def colors(self) -> np.ndarray:
        return np.stack([layer.color for layer in self.layers])

    def alphas(self) -> np.ndarray:
        return np.stack([layer.alpha for layer in self.layers])

    def permuted(self, order: Sequence[int]) -> LayerStack:
        return LayerStack(tuple(self.layers[i] for i in order))

    def padded(self, n_layers: int) -> LayerStack:
        if n_layers < len(self):
            raise StructuralError(f"cannot pad a {len(self)}-layer stack down to {n_layers}")
        h, w = self.shape
        return LayerStack(self.layers + tuple(LayerImage.empty(h, w) for _ in range(n_layers - len(self))))

    @classmethod
    def from_arrays(cls, colors: np.ndarray, alphas: np.ndarray) -> LayerStack:
        return cls(tuple(LayerImage(c, a) for c, a in zip(colors, alphas)))


def composite_tensors(
    colors: torch.Tensor, masks: torch.Tensor, delta: float = DELTA
) -> tuple[torch.Tensor, torch.Tensor]:
    """Differentiable back-to-front compositing.

    ``colors`` has shape (..., N, C, H, W) and ``masks`` (..., N, H, W). Returns
    the unclamped composite (..., C, H, W) and the accumulated coverage
    (..., H, W).
    """
    if colors.shape[:-3] != masks.shape[:-2] or colors.shape[-2:] != masks.shape[-2:]:
        raise StructuralError(f"colors {tuple(colors.shape)} and masks {tuple(masks.shape)} disagree")
    n = colors.shape[-4]
    acc = torch.zeros_like(colors[..., 0, :, :, :])
    cover = torch.zeros_like(masks[..., 0, :, :])
    for i in range(n):
        m = masks[..., i, :, :]
        new_cover = cover * (1 - m) + m
        acc = (colors[..., i, :, :, :] * m.unsqueeze(-3) + (cover * (1 - m)).unsqueeze(-3) * acc) / (
            new_cover.unsqueeze(-3) + delta
        )
        cover = new_cover
    return acc, cover


def composite(stack: LayerStack, delta: float = DELTA) -> np.ndarray:
    """Composite a stack into an (H, W, 3) image clamped to [0, 1]."""
    if delta <= 0:
        raise ValidationError("delta must be positive")
    colors = torch.from_numpy(np.moveaxis(stack.colors(), -1, -3))
    masks = torch.from_numpy(stack.alphas())
    out, _ = composite_tensors(colors, masks, delta)
    return np.clip(np.moveaxis(out.numpy(), -3, -1), 0.0, 1.0)


def apply_shadows(background: LayerImage, shadows: Sequence[np.ndarray]) -> LayerImage:
    """Darken the background by the product of ``(1 - s)`` over all shadow maps."""
    factor = np.ones(background.shape)
    for i, s in enumerate(shadows):
        s = np.asarray(s, dtype=np.float64)
        if s.shape != background.shape:
            raise StructuralError(f"shadow {i} has shape {s.shape}, expected {background.shape}")
        factor = factor * (1.0 - s)
    return LayerImage(background.color * factor[..., None], background.alpha)


def soft_mask(alpha, sharpness: float = DEFAULT_SHARPNESS):
    """Sigmoid of ``sharpness * (alpha - 0.5)``; accepts numpy arrays or tensors."""
    if sharpness <= 0:
        raise ValidationError("sharpness must be positive")
    if isinstance(alpha, torch.Tensor):
        return torch.sigmoid(sharpness * (alpha - 0.5))
    return 1.0 / (1.0 + np.exp(-sharpness * (np.asarray(alpha, dtype=np.float64) - 0.5)))


def panoptic_labels(alphas: np.ndarray) -> np.ndarray:
    """Frontmost-wins labels from an (N, H, W) alpha array."""
    binary = np.asarray(alphas) >= BINARY_THRESHOLD
    labels = np.zeros(binary.shape[1:], dtype=np.int64)
    for i in range(1, binary.shape[0]):
        labels[binary[i]] = i + 1
    return labels


def panoptic_project(stack: LayerStack) -> np.ndarray:
    """Integer (H, W) map of the frontmost foreground layer number, 0 for background."""
    return panoptic_labels(stack.alphas())


class Visibility(NamedTuple):
    fraction: float
    empty: bool


def layer_visibility(stack: LayerStack, index: int) -> Visibility:
    """Visible share of layer ``index`` (0-based); empty layers report 0 with ``empty=True``."""
    if index == 0:
        return Visibility(1.0, False)
    own = stack[index].alpha >= BINARY_THRESHOLD
    total = int(own.sum())
    if total == 0:
        return Visibility(0.0, True)
    visible = int((panoptic_project(stack) == index + 1).sum())
    return Visibility(visible / total, False)


def visibility_fraction(stack: LayerStack, index: int) -> float:
    return layer_visibility(stack, index).fraction
