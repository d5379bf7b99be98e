"""Denoising-objective training for the base network and the adapter/coupling weights."""

from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch
from torch.nn import functional as F

from ..compositor import LayerStack
from ..errors import ContractViolation, TrainingError, ValidationError
from .codec import encode_image, encode_stack
from .network import CoupledDenoiser
from .schedule import NoiseSchedule, add_noise

log = logging.getLogger(__name__)

OPTIMIZER = "adam"


@dataclass
class TrainLog:
    steps: list[int] = field(default_factory=list)
    loss: list[float] = field(default_factory=list)
    held_out: list[tuple[int, float]] = field(default_factory=list)
    optimizer: str = OPTIMIZER


def parameter_checksum(params) -> str:
    h = hashlib.sha256()
    for p in params:
        h.update(p.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def layer_latents(stacks: list[LayerStack]) -> torch.Tensor:
    """All layers of all stacks as single-layer latents (M, 4, H, W)."""
    return torch.cat([encode_stack(s) for s in stacks])


def stack_latents(stacks: list[LayerStack]) -> torch.Tensor:
    return torch.stack([encode_stack(s) for s in stacks])


def image_tensors(images) -> torch.Tensor:
    return torch.stack([encode_image(im) for im in images])


def _noised(z0: torch.Tensor, schedule: NoiseSchedule, gen: torch.Generator):
    t = torch.randint(1, schedule.T + 1, (z0.shape[0],), generator=gen)
    eps = torch.randn(z0.shape, generator=gen, dtype=z0.dtype)
    return add_noise(z0, t, eps, schedule), t, eps


def _weighted_mse(pred: torch.Tensor, eps: torch.Tensor, t: torch.Tensor, schedule: NoiseSchedule,
                  snr_gamma: float | None) -> torch.Tensor:
    """Plain MSE, or min-SNR weighting min(snr, gamma) / snr per item when ``snr_gamma`` is set."""
    if snr_gamma is None:
        return F.mse_loss(pred, eps)
    ab = torch.as_tensor(schedule.alpha_bar, dtype=pred.dtype)[t]
    snr = ab / (1 - ab)
    weight = snr.clamp(max=snr_gamma) / snr
    per_item = ((pred - eps) ** 2).reshape(pred.shape[0], -1).mean(1)
    return (weight * per_item).mean()


def base_loss(model: CoupledDenoiser, z0: torch.Tensor, schedule: NoiseSchedule, gen: torch.Generator,
              snr_gamma: float | None = None) -> torch.Tensor:
    z_t, t, eps = _noised(z0, schedule, gen)
    pred = model.base(z_t, t)
    return _weighted_mse(pred, eps, t, schedule, snr_gamma)


def _check(loss: torch.Tensor, step: int) -> None:
    if not torch.isfinite(loss):
        raise TrainingError(f"loss became non-finite at step {step}")


def _cosine_lr(opt: torch.optim.Optimizer, lr: float, step: int, steps: int, warmup: int) -> None:
    if step < warmup:
        scale = (step + 1) / warmup
    else:
        scale = 0.5 * (1 + math.cos(math.pi * (step - warmup) / max(1, steps - warmup)))
    for group in opt.param_groups:
        group["lr"] = lr * max(scale, 0.02)


def train_base(
    model: CoupledDenoiser,
    layers: torch.Tensor,
    schedule: NoiseSchedule,
    steps: int,
    lr: float = 1e-4,
    batch_size: int = 64,
    seed: int = 0,
    held_out: torch.Tensor | None = None,
    eval_every: int = 0,
    cosine: bool = False,
    snr_gamma: float | None = None,
) -> TrainLog:
    """Fit the base network to single gray-canvas layers; freezes it afterwards."""
    if len(layers) == 0:
        raise ValidationError("training set is empty")
    gen = torch.Generator().manual_seed(seed)
    params = model.theta()
    for p in params:
        p.requires_grad_(True)
    opt = torch.optim.Adam(params, lr=lr)
    out = TrainLog()
    eval_gen = torch.Generator()
    for step in range(steps):
        if cosine:
            _cosine_lr(opt, lr, step, steps, warmup=min(200, steps // 10 + 1))
        idx = torch.randint(0, len(layers), (min(batch_size, len(layers)),), generator=gen)
        loss = base_loss(model, layers[idx], schedule, gen, snr_gamma)
        _check(loss, step)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        out.steps.append(step)
        out.loss.append(float(loss.detach()))
        if held_out is not None and eval_every and (step + 1) % eval_every == 0:
            with torch.no_grad():
                eval_gen.manual_seed(seed + 1)
                out.held_out.append((step + 1, float(base_loss(model, held_out, schedule, eval_gen))))
            log.info("base step %d loss %.4f held-out %.4f", step + 1, loss, out.held_out[-1][1])
    model.freeze_base()
    return out


def adapter_loss(model: CoupledDenoiser, z0: torch.Tensor, images: torch.Tensor, schedule: NoiseSchedule,
                 gen: torch.Generator, cond_dropout: float, snr_gamma: float | None = None) -> torch.Tensor:
    z_t, t, eps = _noised(z0, schedule, gen)
    drop = torch.rand(z0.shape[0], generator=gen) < cond_dropout
    cond = model.condition_batch(images, drop)
    pred = model.predict_eps(z_t, t, cond, coupled=True)
    return _weighted_mse(pred, eps, t, schedule, snr_gamma)


def train_adapter(
    model: CoupledDenoiser,
    images: torch.Tensor,
    stacks: torch.Tensor,
    schedule: NoiseSchedule,
    steps: int,
    lr: float = 1e-4,
    cond_dropout: float = 0.1,
    batch_size: int = 8,
    seed: int = 0,
    cosine: bool = False,
    snr_gamma: float | None = None,
) -> TrainLog:
    """Optimize coupling, adapter, gates and null embedding with the base frozen.

    ``images`` is (S, 3, H, W) in [-1, 1]; ``stacks`` is (S, N, 4, H, W).
    """
    if len(stacks) == 0:
        raise ValidationError("training set is empty")
    if stacks.shape[1] != model.n_layers:
        raise ValidationError(f"stacks have {stacks.shape[1]} layers, model expects {model.n_layers}")
    model.freeze_base()
    params = model.adapter_parameters()
    theta_ids = {id(p) for p in model.theta()}
    if any(id(p) in theta_ids for p in params):
        raise ContractViolation("base parameters must not be optimized")
    before = parameter_checksum(model.theta())
    gen = torch.Generator().manual_seed(seed)
    opt = torch.optim.Adam(params, lr=lr)
    out = TrainLog()
    for step in range(steps):
        if cosine:
            _cosine_lr(opt, lr, step, steps, warmup=min(200, steps // 10 + 1))
        idx = torch.randint(0, len(stacks), (min(batch_size, len(stacks)),), generator=gen)
        loss = adapter_loss(model, stacks[idx], images[idx], schedule, gen, cond_dropout, snr_gamma)
        _check(loss, step)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        out.steps.append(step)
        out.loss.append(float(loss.detach()))
        if (step + 1) % 500 == 0:
            log.info("adapter step %d loss %.4f", step + 1, np.mean(out.loss[-500:]))
    if parameter_checksum(model.theta()) != before:
        raise ContractViolation("base parameters changed during adapter training")
    if cond_dropout >= 1:
        model.unconditional = True
    return out
