"""Guided concurrent sampling of layer stacks.

Each reverse step estimates clean layers, measures how well they composite
back to the input image (plus a prior score-matching penalty), nudges the
noisy latents down that loss's gradient and then takes a DDIM step whose
noise term is re-evaluated at the nudged latents. Every ``update_period``
steps the layers are re-ordered, hidden hallucinations are erased and empty
slots are moved to the back.
"""

from __future__ import annotations

import itertools
import math
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from .compositor import DEFAULT_SHARPNESS, DELTA, LayerStack, composite_tensors, soft_mask
from .diffusion.codec import decode, decode_stack, empty_latent
from .diffusion.denoisers import Conditioning, Denoiser, GaussianMixtureDenoiser
from .diffusion.schedule import NoiseSchedule, ddim_estimate_z0
from .errors import CapabilityError, NumericalError, ValidationError

MAX_PERMUTE_LAYERS = 8


@dataclass
class GuidanceConfig:
    w: float = 1e4
    lam: float = 1e-7
    cfg_scale: float = 3.0
    update_period: int = 5  # 0 disables the non-differentiable updates
    erase_visibility_threshold: float = 0.01
    empty_alpha_threshold: float = 0.001
    exact_gradient: bool | None = None  # None: exact for analytic denoisers only
    sharpness: float = DEFAULT_SHARPNESS
    delta: float = DELTA
    conditioned: bool = True  # False samples with the null embedding on both CFG branches
    clip_z0: bool = True  # clamp the clean estimate to the latent range along the trajectory

    def __post_init__(self) -> None:
        if self.w < 0 or self.lam < 0:
            raise ValidationError("w and lam must be non-negative")
        if self.update_period < 0:
            raise ValidationError("update_period must be >= 1, or 0 to disable updates")
        for name in ("erase_visibility_threshold", "empty_alpha_threshold"):
            if not 0 < getattr(self, name) < 1:
                raise ValidationError(f"{name} must lie in (0, 1)")

    @classmethod
    def unguided(cls, **overrides) -> GuidanceConfig:
        """Plain DDIM: no gradient guidance, no CFG, no interventions, no clamping."""
        return cls(**{"w": 0.0, "lam": 0.0, "cfg_scale": 1.0, "update_period": 0, "clip_z0": False, **overrides})

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class StepRecord:
    t: int
    t_prev: int
    composite_loss: float
    psm_loss: float | None
    events: list[dict] = field(default_factory=list)


@dataclass
class SampleTrace:
    records: list[StepRecord] = field(default_factory=list)
    seed: int | None = None

    def to_dict(self) -> dict:
        return {"seed": self.seed, "steps": [asdict(r) for r in self.records]}


# ----------------------------------------------------------------------------- losses


def layer_masks(z0_hat: torch.Tensor, sharpness: float = DEFAULT_SHARPNESS) -> tuple[torch.Tensor, torch.Tensor]:
    colors, alpha = decode(z0_hat)
    return colors, soft_mask(alpha, sharpness)


def compositional_loss(image: torch.Tensor, z0_hat: torch.Tensor, sharpness: float = DEFAULT_SHARPNESS,
                       delta: float = DELTA) -> torch.Tensor:
    """Mean squared error between ``image`` (3, H, W) in [0, 1] and the soft composite of ``z0_hat``."""
    colors, masks = layer_masks(z0_hat, sharpness)
    comp, _ = composite_tensors(colors, masks, delta)
    if comp.shape[-3:] != image.shape:
        raise ValidationError(f"image {tuple(image.shape)} does not match layers {tuple(comp.shape[-3:])}")
    return ((image.to(comp.dtype) - comp) ** 2).mean(dim=(-3, -2, -1))


def psm_loss(model: Denoiser, z0_hat: torch.Tensor, t: int, cond: Conditioning) -> torch.Tensor:
    """Squared gap between the adapted prediction and the frozen base prediction at ``z0_hat``.

    The base prediction is a constant target (no gradient flows into it).
    """
    with torch.no_grad():
        target = model.predict_eps(z0_hat, t, None, coupled=False)
    adapted = model.predict_eps(z0_hat, t, cond, coupled=True)
    return ((target - adapted) ** 2).mean()


def cfg_eps(model: Denoiser, z_t: torch.Tensor, t: int, cond: Conditioning, null: Conditioning,
            scale: float) -> torch.Tensor:
    if scale == 1.0:
        return model.predict_eps(z_t, t, cond, coupled=True)
    both = model.predict_eps(torch.stack([z_t, z_t]), t, Conditioning.cat([cond, null]), coupled=True)
    eps_c, eps_u = both[0], both[1]
    return eps_u + scale * (eps_c - eps_u)


def guidance_loss(model: Denoiser, z_t: torch.Tensor, t: int, image: torch.Tensor, cond: Conditioning,
                  null: Conditioning, config: GuidanceConfig, schedule: NoiseSchedule):
    """Differentiable (L_g, L_c, L_psm, eps_hat, z0_hat) as functions of ``z_t``."""
    eps_hat = cfg_eps(model, z_t, t, cond, null, config.cfg_scale)
    z0_hat = ddim_estimate_z0(z_t, eps_hat, t, schedule)
    lg, lc, lpsm = _losses(model, z0_hat, t, image, cond, config)
    return lg, lc, lpsm, eps_hat, z0_hat


def _losses(model: Denoiser, z0_hat: torch.Tensor, t: int, image: torch.Tensor, cond: Conditioning,
            config: GuidanceConfig):
    # with clip_z0 the losses see the same clamped estimate as the trajectory
    z0 = z0_hat.clamp(-1.0, 1.0) if config.clip_z0 else z0_hat
    lc = compositional_loss(image, z0, config.sharpness, config.delta)
    lpsm = psm_loss(model, z0, t, cond) if config.lam > 0 else None
    lg = lc if lpsm is None else lc + config.lam * lpsm
    return lg, lc, lpsm


def _exact_default(model: Denoiser, config: GuidanceConfig) -> bool:
    if config.exact_gradient is not None:
        return config.exact_gradient
    return isinstance(model, GaussianMixtureDenoiser)


def guidance_gradient(model: Denoiser, z_t: torch.Tensor, t: int, image: torch.Tensor, cond: Conditioning,
                      null: Conditioning, config: GuidanceConfig, schedule: NoiseSchedule, exact: bool):
    """Gradient of the guidance loss w.r.t. ``z_t``.

    The approximate mode treats the noise prediction as constant, so the clean
    estimate moves by 1/sqrt(ab_t) per unit change of ``z_t``.
    """
    if exact:
        z = z_t.detach().requires_grad_(True)
        lg, lc, lpsm, eps_hat, z0_hat = guidance_loss(model, z, t, image, cond, null, config, schedule)
        (grad,) = torch.autograd.grad(lg, z)
        return grad, lc.detach(), None if lpsm is None else lpsm.detach(), eps_hat.detach(), z0_hat.detach()
    with torch.no_grad():
        eps_hat = cfg_eps(model, z_t, t, cond, null, config.cfg_scale)
        z0_hat = ddim_estimate_z0(z_t, eps_hat, t, schedule)
    z0 = z0_hat.clone().requires_grad_(True)
    lg, lc, lpsm = _losses(model, z0, t, image, cond, config)
    (g0,) = torch.autograd.grad(lg, z0)
    grad = g0 / math.sqrt(schedule.ab(t))
    return grad, lc.detach(), None if lpsm is None else lpsm.detach(), eps_hat, z0_hat


def guided_step(model: Denoiser, z_t: torch.Tensor, t: int, t_prev: int, image: torch.Tensor,
                config: GuidanceConfig, schedule: NoiseSchedule, cond: Conditioning, null: Conditioning):
    """One guided reverse step. Returns (z_prev, z0_hat, eps_used, record)."""
    if not t > t_prev >= 0:
        raise ValidationError(f"need t > t_prev >= 0, got {t}, {t_prev}")
    guided = config.w > 0 or config.lam > 0
    if guided:
        with torch.enable_grad():
            grad, lc, lpsm, eps_hat, z0_hat = guidance_gradient(
                model, z_t, t, image, cond, null, config, schedule, _exact_default(model, config))
        if not torch.isfinite(grad).all():
            raise NumericalError(f"non-finite guidance gradient at t={t}")
        with torch.no_grad():
            z_tilde = z_t - config.w * grad
            eps_tilde = cfg_eps(model, z_tilde, t, cond, null, config.cfg_scale)
    else:
        with torch.no_grad():
            eps_hat = cfg_eps(model, z_t, t, cond, null, config.cfg_scale)
            z0_hat = ddim_estimate_z0(z_t, eps_hat, t, schedule)
            lc = compositional_loss(image, z0_hat.clamp(-1.0, 1.0) if config.clip_z0 else z0_hat,
                                    config.sharpness, config.delta)
        lpsm = None
        eps_tilde = eps_hat
    if config.clip_z0:
        # shift eps to stay consistent with the clamped estimate; the guidance offset is kept
        clamped = z0_hat.clamp(-1.0, 1.0)
        ab = schedule.ab(t)
        eps_tilde = eps_tilde + (z0_hat - clamped) * math.sqrt(ab / (1 - ab))
        z0_hat = clamped
    ab_prev = schedule.ab(t_prev)
    z_prev = math.sqrt(ab_prev) * z0_hat + math.sqrt(1 - ab_prev) * eps_tilde
    if not torch.isfinite(z_prev).all():
        raise NumericalError(f"sampling diverged at t={t}; try a smaller guidance step w (now {config.w:g})")
    record = StepRecord(int(t), int(t_prev), float(lc), None if lpsm is None else float(lpsm))
    return z_prev.detach(), z0_hat.detach(), eps_tilde.detach(), record


# ----------------------------------------------------------------- discrete updates


def _children(prefixes: list[tuple[int, ...]], n: int):
    parents, layers, out = [], [], []
    for p_idx, prefix in enumerate(prefixes):
        for j in range(n):
            if j not in prefix:
                parents.append(p_idx)
                layers.append(j)
                out.append(prefix + (j,))
    return torch.tensor(parents), torch.tensor(layers), out


def all_order_losses(colors: torch.Tensor, masks: torch.Tensor, image: torch.Tensor,
                     delta: float = DELTA, chunk_levels: int = 4) -> tuple[list[tuple[int, ...]], torch.Tensor]:
    """Compositional loss of every ordering, in lexicographic order of permutations.

    Orderings sharing a prefix share their partial composites. Coverage after
    a set of layers does not depend on their order, so the per-set factors are
    tabulated once and each tree node costs one fused multiply-add. The lower
    ``chunk_levels`` levels are expanded one subtree at a time to keep the
    working set small.
    """
    n, c = colors.shape[:2]
    hw = masks[0].numel()
    cols = colors.reshape(n, c, hw)
    ms = masks.reshape(n, hw)
    cover = torch.zeros(1 << n, hw, dtype=colors.dtype)
    for subset in range(1, 1 << n):
        low = (subset & -subset).bit_length() - 1
        cover[subset] = cover[subset & ~(1 << low)] * (1 - ms[low]) + ms[low]
    inv = 1.0 / (cover + delta)
    premult = cols * ms[:, None]
    target = image.reshape(1, c, hw).to(colors.dtype)

    def expand(prefixes, sets, acc):
        parents, layers, out = _children(prefixes, n)
        old_sets = sets[parents]
        new_sets = old_sets | (1 << layers)
        scale = inv[new_sets]
        carry = cover[old_sets] * (1 - ms[layers]) * scale
        return out, new_sets, torch.addcmul(premult[layers] * scale[:, None], carry[:, None], acc[parents])

    prefixes = [()]
    sets = torch.zeros(1, dtype=torch.long)
    acc = torch.zeros(1, c, hw, dtype=colors.dtype)
    for _ in range(max(0, n - chunk_levels)):
        prefixes, sets, acc = expand(prefixes, sets, acc)
    orders: list[tuple[int, ...]] = []
    losses = []
    for i, prefix in enumerate(prefixes):
        sub = ([prefix], sets[i:i + 1], acc[i:i + 1])
        for _ in range(n - len(prefix)):
            sub = expand(*sub)
        orders.extend(sub[0])
        losses.append(((target - sub[2]) ** 2).mean(dim=(1, 2)))
    return orders, torch.cat(losses)


def permute_update(z0_hat: torch.Tensor, image: torch.Tensor, sharpness: float = DEFAULT_SHARPNESS,
                   delta: float = DELTA, rtol: float = 1e-7, atol: float = 1e-10) -> tuple[int, ...]:
    """Ordering of the N layers minimizing the compositional loss.

    Returns ``perm`` such that ``z0_hat[list(perm)]`` is the best stack. Ties
    (within ``rtol``/``atol``) go to the lexicographically smallest ordering.
    """
    n = z0_hat.shape[0]
    if n > MAX_PERMUTE_LAYERS:
        raise CapabilityError(f"exhaustive search over {n}! orderings is too large; use a sampled search")
    with torch.no_grad():
        colors, masks = layer_masks(z0_hat.to(torch.float64), sharpness)
        perms, losses = all_order_losses(colors, masks, image.to(torch.float64), delta)
    best = float(losses.min())
    winner = int(torch.nonzero(losses <= best + atol + rtol * abs(best))[0])
    return perms[winner]


def _binary_alphas(z0_hat: torch.Tensor) -> np.ndarray:
    _, alpha = decode(z0_hat.detach().to(torch.float64))
    return (alpha >= 0.5).numpy()


def erase_update(z0_hat: torch.Tensor, threshold: float = 0.01) -> tuple[torch.Tensor, list[dict]]:
    """Replace foreground layers whose visible share is below ``threshold`` with the empty layer."""
    binary = _binary_alphas(z0_hat)
    n, h, w = binary.shape
    labels = np.zeros((h, w), dtype=np.int64)
    for i in range(1, n):
        labels[binary[i]] = i
    out = z0_hat.clone()
    events = []
    empty = empty_latent(h, w, dtype=z0_hat.dtype)
    for i in range(1, n):
        total = int(binary[i].sum())
        if total == 0:
            out[i] = empty
            continue
        visible = int((labels == i).sum()) / total
        if visible < threshold:
            out[i] = empty
            events.append({"kind": "erase", "layer": i, "visibility": visible})
    return out, events


def empty_layers(z0_hat: torch.Tensor, threshold: float = 0.001) -> list[bool]:
    binary = _binary_alphas(z0_hat)
    return [bool(b.mean() < threshold) for b in binary]


def sort_update(z0_hat: torch.Tensor, threshold: float = 0.001) -> tuple[int, ...]:
    """Stable partition moving empty foreground layers to the tail; slot 0 stays put."""
    empty = empty_layers(z0_hat, threshold)
    rest = range(1, len(empty))
    return (0, *[i for i in rest if not empty[i]], *[i for i in rest if empty[i]])


# --------------------------------------------------------------------------- sampling


@contextmanager
def _threads(n: int):
    old = torch.get_num_threads()
    torch.set_num_threads(n)
    try:
        yield
    finally:
        torch.set_num_threads(old)


def initial_noise(shape, seed: int, dtype=torch.float32) -> torch.Tensor:
    gen = torch.Generator().manual_seed(int(seed))
    return torch.randn(shape, generator=gen, dtype=torch.float64).to(dtype)


def sample(model: Denoiser, image, config: GuidanceConfig, schedule: NoiseSchedule, seed: int,
           shape: tuple[int, int, int, int] | None = None, dtype=torch.float32,
           return_latent: bool = False):
    """Run the full guided loop for an (H, W, 3) image in [0, 1] or a (3, H, W) tensor.

    Returns ``(LayerStack, SampleTrace)``; with ``return_latent`` the final
    clean latent is appended.
    """
    img = torch.as_tensor(np.moveaxis(np.asarray(image, dtype=np.float64), -1, 0)) if not isinstance(image, torch.Tensor) else image
    img = img.to(dtype)
    if shape is None:
        shape = (model.n_layers, 4, img.shape[-2], img.shape[-1])
    trace = SampleTrace(seed=int(seed))
    with _threads(1):
        with torch.no_grad():
            null = model.condition(None)
            cond = model.condition(img * 2 - 1) if config.conditioned else null
        z = initial_noise(shape, seed, dtype)
        z0_hat = z
        for k, (t, t_prev) in enumerate(schedule.reverse_pairs(), start=1):
            z, z0_hat, eps_used, record = guided_step(model, z, t, t_prev, img, config, schedule, cond, null)
            if config.update_period and k % config.update_period == 0 and t_prev > 0:
                z, z0_hat, record.events = _intervene(z, z0_hat, eps_used, img, t_prev, config, schedule)
            trace.records.append(record)
        final, _ = erase_update(z0_hat, config.erase_visibility_threshold) if config.update_period else (z0_hat, [])
        if config.update_period:
            final = final[list(sort_update(final, config.empty_alpha_threshold))]
        final = _canonicalize_empties(final, config.empty_alpha_threshold)
    stack = decode_stack(final)
    return (stack, trace, final) if return_latent else (stack, trace)


def _canonicalize_empties(z0: torch.Tensor, threshold: float) -> torch.Tensor:
    out = z0.clone()
    for i, is_empty in enumerate(empty_layers(z0, threshold)):
        if i > 0 and is_empty:
            out[i] = empty_latent(z0.shape[-2], z0.shape[-1], dtype=z0.dtype)
    return out


def _intervene(z_prev, z0_hat, eps_used, image, t_prev, config, schedule):
    events: list[dict] = []
    perm = list(permute_update(z0_hat, image, config.sharpness, config.delta))
    if perm != sorted(perm):
        events.append({"kind": "permute", "order": perm})
    z_prev, z0_hat, eps_used = z_prev[perm], z0_hat[perm], eps_used[perm]
    erased, erase_events = erase_update(z0_hat, config.erase_visibility_threshold)
    if erase_events:
        ab = schedule.ab(t_prev)
        for ev in erase_events:
            i = ev["layer"]
            z_prev[i] = math.sqrt(ab) * erased[i] + math.sqrt(1 - ab) * eps_used[i]
        events.extend(erase_events)
    z0_hat = erased
    order = list(sort_update(z0_hat, config.empty_alpha_threshold))
    if order != sorted(order):
        events.append({"kind": "sort", "order": order})
    return z_prev[order], z0_hat[order], events
