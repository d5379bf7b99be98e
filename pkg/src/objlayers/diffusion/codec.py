"""Identity latent codec.

A layer becomes four channels in [-1, 1]: RGB pre-composited on a 0.5 gray
canvas, then alpha. Decoding is the inverse affine map with no clamping so
gradients pass through unchanged.
"""

from __future__ import annotations

import numpy as np
import torch

from ..compositor import LayerImage, LayerStack

CHANNELS = 4


def encode_stack(stack: LayerStack, dtype=torch.float32) -> torch.Tensor:
    """(N, 4, H, W) latent for a stack."""
    arr = np.stack([np.concatenate([layer.on_gray(), layer.alpha[..., None]], axis=-1) for layer in stack])
    return torch.from_numpy(np.moveaxis(arr, -1, 1) * 2.0 - 1.0).to(dtype)


def encode_image(image: np.ndarray, dtype=torch.float32) -> torch.Tensor:
    """(3, H, W) conditioning tensor in [-1, 1] from an (H, W, 3) image in [0, 1]."""
    return torch.from_numpy(np.moveaxis(np.asarray(image, dtype=np.float64), -1, 0) * 2.0 - 1.0).to(dtype)


def decode(z: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Split latents (..., 4, H, W) into gray-canvas colors (..., 3, H, W) and alpha (..., H, W)."""
    x = (z + 1.0) * 0.5
    return x[..., :3, :, :], x[..., 3, :, :]


def decode_stack(z: torch.Tensor, binarize: bool = True) -> LayerStack:
    """Turn an (N, 4, H, W) latent into a valid LayerStack.

    Colors are clamped to [0, 1]; with ``binarize`` alphas are thresholded at 0.5
    and pixels outside the mask are reset to gray.
    """
    rgb, alpha = decode(z.detach().to(torch.float64))
    rgb = rgb.clamp(0, 1).numpy()
    alpha = alpha.clamp(0, 1).numpy()
    if binarize:
        alpha = (alpha >= 0.5).astype(np.float64)
        rgb = rgb * alpha[:, None] + 0.5 * (1 - alpha[:, None])
    return LayerStack(tuple(LayerImage(np.moveaxis(c, 0, -1), a) for c, a in zip(rgb, alpha)))


def empty_latent(height: int, width: int, dtype=torch.float32) -> torch.Tensor:
    """Canonical empty layer: gray RGB (0 in latent space) and zero alpha (-1)."""
    z = torch.zeros(CHANNELS, height, width, dtype=dtype)
    z[3] = -1.0
    return z
