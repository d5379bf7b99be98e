"""Linear-beta noise schedules, forward noising and the DDIM clean estimate."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from ..errors import StructuralError, ValidationError


@dataclass(frozen=True)
class NoiseSchedule:
    """``alpha_bar[t]`` for t = 0..T with ``alpha_bar[0] == 1``; ``betas[t - 1]`` is beta_t."""

    betas: np.ndarray
    alpha_bar: np.ndarray
    timesteps: np.ndarray  # increasing inference subsequence drawn from [1, T]
    beta_start: float
    beta_end: float

    @property
    def T(self) -> int:
        return len(self.betas)

    def ab(self, t: int) -> float:
        return float(self.alpha_bar[int(t)])

    def reverse_pairs(self) -> list[tuple[int, int]]:
        """(t, t_prev) pairs from T down to 0."""
        ts = [int(t) for t in self.timesteps[::-1]]
        return list(zip(ts, ts[1:] + [0]))

    def with_inference_steps(self, steps: int) -> NoiseSchedule:
        return make_schedule(self.T, self.beta_start, self.beta_end, steps)

    def to_dict(self) -> dict:
        return {"T": self.T, "beta_start": self.beta_start, "beta_end": self.beta_end,
                "inference_steps": len(self.timesteps)}


def make_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02,
                  inference_steps: int = 30) -> NoiseSchedule:
    if T < 1:
        raise ValidationError("T must be at least 1")
    if not 0 < beta_start <= beta_end < 1:
        raise ValidationError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    if not 1 <= inference_steps <= T:
        raise ValidationError(f"inference_steps must lie in [1, {T}]")
    betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alpha_bar = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
    timesteps = np.unique(np.rint(np.linspace(1, T, inference_steps)).astype(np.int64))
    if len(timesteps) != inference_steps:
        raise ValidationError("inference timesteps collide; use fewer steps")
    return NoiseSchedule(betas, alpha_bar, timesteps, float(beta_start), float(beta_end))


def add_noise(z0: torch.Tensor, t, eps: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    """sqrt(ab_t) z0 + sqrt(1 - ab_t) eps; ``t`` may be an int or a per-item tensor."""
    if z0.shape != eps.shape:
        raise StructuralError(f"z0 {tuple(z0.shape)} and eps {tuple(eps.shape)} differ")
    ab = _ab(t, schedule, z0)
    return ab.sqrt() * z0 + (1 - ab).sqrt() * eps


def ddim_estimate_z0(z_t: torch.Tensor, eps_hat: torch.Tensor, t, schedule: NoiseSchedule) -> torch.Tensor:
    if z_t.shape != eps_hat.shape:
        raise StructuralError(f"z_t {tuple(z_t.shape)} and eps {tuple(eps_hat.shape)} differ")
    ab = _ab(t, schedule, z_t)
    if (ab <= 0).any():
        raise ValidationError("alpha_bar is zero; the clean estimate is undefined")
    return (z_t - (1 - ab).sqrt() * eps_hat) / ab.sqrt()


def _ab(t, schedule: NoiseSchedule, like: torch.Tensor) -> torch.Tensor:
    if isinstance(t, torch.Tensor) and t.ndim > 0:
        ab = torch.as_tensor(schedule.alpha_bar, dtype=like.dtype)[t.long()]
        return ab.reshape(-1, *([1] * (like.ndim - 1)))
    return torch.tensor(schedule.ab(int(t)), dtype=like.dtype)


def ddim_step(z_t: torch.Tensor, eps_hat: torch.Tensor, t: int, t_prev: int, schedule: NoiseSchedule) -> torch.Tensor:
    """Deterministic DDIM update from ``t`` to ``t_prev``."""
    z0 = ddim_estimate_z0(z_t, eps_hat, t, schedule)
    ab_prev = schedule.ab(t_prev)
    return ab_prev**0.5 * z0 + (1 - ab_prev) ** 0.5 * eps_hat


def ddim_sample(model, z_T: torch.Tensor, schedule: NoiseSchedule, cond=None, coupled: bool = True) -> torch.Tensor:
    """Plain DDIM from ``z_T`` to a clean sample, no guidance of any kind."""
    z = z_T
    with torch.no_grad():
        for t, t_prev in schedule.reverse_pairs():
            z = ddim_step(z, model.predict_eps(z, t, cond, coupled=coupled), t, t_prev, schedule)
    return z
