"""Trainable coupled denoiser.

A frozen per-layer base network (theta) is shared across the N layer slots.
Two gated additions sit on top of it: a conditioning adapter (psi) whose
features are added after each encoder and decoder stage, and a lateral
block (phi) after each of those points mixes features across slots. A gate value of 1
skips its block entirely, which recovers the base network exactly.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
from torch import nn
from torch.nn import functional as F

from .codec import CHANNELS
from .denoisers import Conditioning


@dataclass(frozen=True)
class ArchConfig:
    n_layers: int = 5
    height: int = 32
    width: int = 32
    channels: tuple[int, int, int] = (16, 32, 32)
    adapter_channels: tuple[int, int, int] = (16, 32, 32)
    time_dim: int = 32
    T: int = 1000

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> ArchConfig:
        d = dict(d)
        d["channels"] = tuple(d["channels"])
        d["adapter_channels"] = tuple(d["adapter_channels"])
        return cls(**d)


def timestep_embedding(t: torch.Tensor, dim: int, T: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    args = (t.to(torch.float64).reshape(-1, 1) / T * 1000.0) * freqs
    return torch.cat([torch.sin(args), torch.cos(args)], dim=-1)


class ResBlock(nn.Module):
    def __init__(self, channels: int, time_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(4, channels)
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.time = nn.Linear(time_dim, channels)
        self.norm2 = nn.GroupNorm(4, channels)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x: torch.Tensor, temb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.time(temb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return x + h


class BaseUNet(nn.Module):
    """Three-stage per-layer UNet. ``inject`` lets a caller modify stage outputs.

    Injection points 0-2 follow the encoder stages (full, 1/2, 1/4 resolution),
    3 and 4 follow the decoder stages (1/2, full).
    """

    def __init__(self, arch: ArchConfig):
        super().__init__()
        c1, c2, c3 = arch.channels
        self.arch = arch
        self.time_mlp = nn.Sequential(nn.Linear(arch.time_dim, 2 * arch.time_dim), nn.SiLU(),
                                      nn.Linear(2 * arch.time_dim, arch.time_dim))
        self.conv_in = nn.Conv2d(CHANNELS, c1, 3, padding=1)
        self.stage1 = ResBlock(c1, arch.time_dim)
        self.down1 = nn.Conv2d(c1, c2, 3, stride=2, padding=1)
        self.stage2 = ResBlock(c2, arch.time_dim)
        self.down2 = nn.Conv2d(c2, c3, 3, stride=2, padding=1)
        self.stage3 = ResBlock(c3, arch.time_dim)
        self.up2 = nn.Conv2d(c3 + c2, c2, 3, padding=1)
        self.up1 = nn.Conv2d(c2 + c1, c1, 3, padding=1)
        self.norm_out = nn.GroupNorm(4, c1)
        self.conv_out = nn.Conv2d(c1, CHANNELS, 3, padding=1)

    def forward(self, x: torch.Tensor, t: torch.Tensor, inject=None) -> torch.Tensor:
        """``x`` is (B, 4, H, W), ``t`` is (B,). ``inject(stage, h)`` returns the replacement for h."""
        temb = self.time_mlp(timestep_embedding(t, self.arch.time_dim, self.arch.T).to(x.dtype))
        h1 = self.stage1(self.conv_in(x), temb)
        if inject is not None:
            h1 = inject(0, h1)
        h2 = self.stage2(self.down1(F.silu(h1)), temb)
        if inject is not None:
            h2 = inject(1, h2)
        h3 = self.stage3(self.down2(F.silu(h2)), temb)
        if inject is not None:
            h3 = inject(2, h3)
        u = F.interpolate(h3, scale_factor=2, mode="nearest")
        u = F.silu(self.up2(torch.cat([u, h2], dim=1)))
        if inject is not None:
            u = inject(3, u)
        u = F.interpolate(u, scale_factor=2, mode="nearest")
        u = F.silu(self.up1(torch.cat([u, h1], dim=1)))
        if inject is not None:
            u = inject(4, u)
        return self.conv_out(F.silu(self.norm_out(u)))


class Adapter(nn.Module):
    """Image features for the five injection points; final convs start at zero."""

    def __init__(self, arch: ArchConfig):
        super().__init__()
        a1, a2, a3 = arch.adapter_channels
        c1, c2, c3 = arch.channels
        self.body1 = nn.Sequential(nn.Conv2d(3, a1, 3, padding=1), nn.SiLU(), nn.Conv2d(a1, a1, 3, padding=1), nn.SiLU())
        self.body2 = nn.Sequential(nn.Conv2d(a1, a2, 3, stride=2, padding=1), nn.SiLU(), nn.Conv2d(a2, a2, 3, padding=1), nn.SiLU())
        self.body3 = nn.Sequential(nn.Conv2d(a2, a3, 3, stride=2, padding=1), nn.SiLU(), nn.Conv2d(a3, a3, 3, padding=1), nn.SiLU())
        self.heads = nn.ModuleList([nn.Conv2d(a1, c1, 1), nn.Conv2d(a2, c2, 1), nn.Conv2d(a3, c3, 1),
                                    nn.Conv2d(a2, c2, 1), nn.Conv2d(a1, c1, 1)])
        for head in self.heads:
            nn.init.zeros_(head.weight)
            nn.init.zeros_(head.bias)

    def forward(self, image: torch.Tensor) -> tuple[torch.Tensor, ...]:
        f1 = self.body1(image)
        f2 = self.body2(f1)
        f3 = self.body3(f2)
        return tuple(head(f) for head, f in zip(self.heads, (f1, f2, f3, f2, f1)))


class LateralMixing(nn.Module):
    """Cross-slot mixing: a spatial 3x3 conv, then a layer-axis mix whose kernel spans all N slots.

    Output for slot i is sum_j W[i, j] h_j plus a per-slot embedding, so the
    block is aware of slot position.
    """

    def __init__(self, n_layers: int, channels: int):
        super().__init__()
        self.mix = nn.Parameter(torch.randn(n_layers, n_layers, channels, channels) / math.sqrt(n_layers * channels))
        self.slot = nn.Parameter(torch.zeros(n_layers, channels))
        self.norm = nn.GroupNorm(4, channels)
        self.spatial = nn.Conv2d(channels, channels, 3, padding=1)
        self.proj = nn.Conv2d(channels, channels, 1)
        nn.init.zeros_(self.proj.weight)
        nn.init.zeros_(self.proj.bias)

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        """``h`` is (B, N, C, H, W)."""
        b, n, c, hh, ww = h.shape
        x = self.spatial(self.norm(h.reshape(b * n, c, hh, ww))).reshape(b, n, c, hh, ww)
        mixed = torch.einsum("ijcd,bjdhw->bichw", self.mix, x) + self.slot[None, :, :, None, None]
        return self.proj(F.silu(mixed).reshape(b * n, c, hh, ww)).reshape(b, n, c, hh, ww)


def _logit(p: float) -> float:
    return math.log(p / (1 - p))


class CoupledDenoiser(nn.Module):
    def __init__(self, arch: ArchConfig):
        super().__init__()
        self.arch = arch
        self.n_layers = arch.n_layers
        self.base = BaseUNet(arch)
        self.adapter = Adapter(arch)
        c1, c2, c3 = arch.channels
        self.lateral = nn.ModuleList([LateralMixing(arch.n_layers, c) for c in (c1, c2, c3, c2, c1)])
        self.null_image = nn.Parameter(torch.zeros(3, arch.height, arch.width))
        # gate = sigmoid(logit); 1 means skip
        self.gate_in_logit = nn.Parameter(torch.tensor(_logit(0.5)))
        self.gate_lateral_logit = nn.Parameter(torch.tensor(_logit(0.5)))
        self.force_skip = False
        self.unconditional = False  # set when trained without ever seeing an image

    # parameter groups
    def theta(self) -> list[nn.Parameter]:
        return list(self.base.parameters())

    def adapter_parameters(self) -> list[nn.Parameter]:
        """phi, psi, the gates and the null embedding."""
        base_ids = {id(p) for p in self.base.parameters()}
        return [p for p in self.parameters() if id(p) not in base_ids]

    def freeze_base(self) -> None:
        for p in self.base.parameters():
            p.requires_grad_(False)

    @property
    def gate_in(self) -> torch.Tensor:
        return torch.sigmoid(self.gate_in_logit)

    @property
    def gate_lateral(self) -> torch.Tensor:
        return torch.sigmoid(self.gate_lateral_logit)

    def set_gates(self, gate_in: float, gate_lateral: float) -> None:
        """Set gate values; 1.0 is stored as +inf logit so the block is skipped exactly."""
        with torch.no_grad():
            for logit, g in ((self.gate_in_logit, gate_in), (self.gate_lateral_logit, gate_lateral)):
                logit.fill_(math.inf if g >= 1 else -math.inf if g <= 0 else _logit(g))

    def condition(self, image: torch.Tensor | None) -> Conditioning:
        if image is None or self.unconditional:
            return Conditioning(tuple(self.adapter(self.null_image[None])), null=True)
        return Conditioning(tuple(self.adapter(image.to(self.null_image.dtype)[None])), null=False)

    def condition_batch(self, images: torch.Tensor, drop: torch.Tensor | None = None) -> Conditioning:
        """Batched features; rows where ``drop`` is True use the null image."""
        if self.unconditional:
            drop = torch.ones(images.shape[0], dtype=torch.bool)
        if drop is not None:
            images = torch.where(drop[:, None, None, None], self.null_image[None].expand_as(images), images)
        return Conditioning(tuple(self.adapter(images)), null=False)

    def predict_eps(self, z_t: torch.Tensor, t, cond: Conditioning | None, coupled: bool = True) -> torch.Tensor:
        """Noise prediction for (N, 4, H, W) or (B, N, 4, H, W) latents.

        ``t`` is an int or a (B,) tensor. With ``coupled=False`` (or gates at 1)
        each slot goes through the base network alone.
        """
        squeeze = z_t.ndim == 4
        z = z_t[None] if squeeze else z_t
        b, n = z.shape[:2]
        tt = torch.as_tensor(t).reshape(-1).expand(b) if not isinstance(t, torch.Tensor) or t.ndim == 0 else t
        tt = tt.repeat_interleave(n)
        x = z.reshape(b * n, *z.shape[2:])
        skip_in = not coupled or self.force_skip or cond is None or bool(self.gate_in >= 1)
        skip_lat = not coupled or self.force_skip or bool(self.gate_lateral >= 1)
        if skip_in and skip_lat:
            out = self.base(x, tt)
        else:
            g_in, g_lat = self.gate_in, self.gate_lateral

            def inject(stage: int, h: torch.Tensor) -> torch.Tensor:
                if not skip_in:
                    f = cond.features[stage]
                    f = f.expand(b, *f.shape[1:]) if f.shape[0] == 1 else f
                    h = h + (1 - g_in) * f.repeat_interleave(n, dim=0)
                if not skip_lat:
                    hs = h.reshape(b, n, *h.shape[1:])
                    h = (hs + (1 - g_lat) * self.lateral[stage](hs)).reshape(h.shape)
                return h

            out = self.base(x, tt, inject)
        out = out.reshape(z.shape)
        return out[0] if squeeze else out
