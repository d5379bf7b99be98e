"""Denoiser interface and the closed-form Gaussian-mixture reference denoiser."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol, Sequence

import torch

from .schedule import NoiseSchedule


@dataclass
class Conditioning:
    """Adapter features for one or more images.

    ``features`` holds one tensor per injection stage, each with a leading
    batch dimension that broadcasts over the layer slots.
    """

    features: tuple[torch.Tensor, ...]
    null: bool = False

    @staticmethod
    def cat(items: Sequence[Conditioning]) -> Conditioning:
        if not items[0].features:
            return Conditioning((), all(c.null for c in items))
        feats = tuple(torch.cat(parts) for parts in zip(*(c.features for c in items)))
        return Conditioning(feats, all(c.null for c in items))


class Denoiser(Protocol):
    n_layers: int

    def condition(self, image: torch.Tensor | None) -> Conditioning:
        """Features for an image in [-1, 1] of shape (3, H, W); ``None`` gives the null embedding."""

    def predict_eps(self, z_t: torch.Tensor, t, cond: Conditioning | None, coupled: bool = True) -> torch.Tensor:
        """Noise prediction for latents shaped (..., N, 4, H, W)."""


class GaussianMixtureDenoiser:
    """Exact epsilon prediction for a per-layer isotropic Gaussian-mixture prior.

    Every layer is an independent draw from sum_k w_k N(mu_k, sigma_k^2 I). The
    prediction is (z_t - sqrt(ab) E[z0 | z_t]) / sqrt(1 - ab). Conditioning and
    coupling are ignored, so coupled and uncoupled outputs coincide.
    """

    def __init__(self, means: torch.Tensor, stds, weights=None, schedule: NoiseSchedule | None = None,
                 n_layers: int = 1):
        self.means = torch.as_tensor(means)
        k = self.means.shape[0]
        self.stds = torch.as_tensor(stds, dtype=self.means.dtype).reshape(k)
        w = torch.full((k,), 1.0 / k) if weights is None else torch.as_tensor(weights)
        self.log_weights = torch.log(w / w.sum()).to(self.means.dtype)
        self.schedule = schedule
        self.n_layers = n_layers

    def condition(self, image: torch.Tensor | None) -> Conditioning:
        return Conditioning((), image is None)

    def posterior_mean(self, z_t: torch.Tensor, ab: torch.Tensor) -> torch.Tensor:
        dtype = z_t.dtype
        mu = self.means.to(dtype)
        var0 = self.stds.to(dtype) ** 2
        lead = z_t.shape[: z_t.ndim - mu.ndim + 1]
        flat = z_t.reshape(*lead, -1)  # (..., D)
        mu_flat = mu.reshape(mu.shape[0], -1)  # (K, D)
        d = flat.shape[-1]
        var_t = ab * var0 + (1 - ab)  # (K,)
        diff = flat.unsqueeze(-2) - ab.sqrt() * mu_flat  # (..., K, D)
        logp = self.log_weights.to(dtype) - 0.5 * (diff**2).sum(-1) / var_t - 0.5 * d * torch.log(var_t)
        resp = torch.softmax(logp, dim=-1)  # (..., K)
        gain = (ab.sqrt() * var0 / var_t).unsqueeze(-1)  # (K, 1)
        cond_mean = mu_flat + gain * diff  # (..., K, D)
        return (resp.unsqueeze(-1) * cond_mean).sum(-2).reshape(z_t.shape)

    def predict_eps(self, z_t: torch.Tensor, t, cond: Conditioning | None = None, coupled: bool = True) -> torch.Tensor:
        ab = torch.tensor(self.schedule.ab(int(t)), dtype=z_t.dtype)
        return (z_t - ab.sqrt() * self.posterior_mean(z_t, ab)) / (1 - ab).sqrt()
