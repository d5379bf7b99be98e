"""Procedural layered tabletop-analogue scenes made of flat 2D shapes.

Objects are placed back to front; object ``k`` (0-based) lands in layer
``k + 1``. Every object casts one elliptical shadow onto the background only.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .compositor import (
    LayerImage,
    LayerStack,
    apply_shadows,
    composite,
    layer_visibility,
    panoptic_project,
)
from .errors import GenerationError, ValidationError

SHAPE_KINDS = ("disc", "rectangle", "triangle")
BACKGROUND_STYLES = ("flat", "vertical-gradient")
MIN_VISIBILITY = 0.05
MAX_RESAMPLES = 100


@dataclass(frozen=True)
class ShapeSpec:
    kind: str
    center: tuple[float, float]  # (row, col) in pixels
    scale: float  # radius-like size in pixels
    aspect: float  # rectangle half-height / half-width ratio
    rotation: float  # radians
    color: tuple[float, float, float]
    noise_amplitude: float
    texture_seed: int


@dataclass(frozen=True)
class BackgroundSpec:
    style: str
    top_color: tuple[float, float, float]
    bottom_color: tuple[float, float, float]
    noise_amplitude: float
    texture_seed: int


@dataclass(frozen=True)
class ShadowSpec:
    offset: tuple[float, float] = (2.0, 2.0)
    strength: float = 0.4


@dataclass(frozen=True)
class SceneSpec:
    seed: int
    canvas: tuple[int, int]
    n_layers: int
    objects: tuple[ShapeSpec, ...]
    background: BackgroundSpec
    shadow: ShadowSpec = field(default_factory=ShadowSpec)

    def __post_init__(self) -> None:
        if len(self.objects) > self.n_layers - 1:
            raise ValidationError(f"{len(self.objects)} objects do not fit in {self.n_layers} layers")
        if self.background.style not in BACKGROUND_STYLES:
            raise ValidationError(f"unknown background style {self.background.style!r}")
        h, w = self.canvas
        for i, obj in enumerate(self.objects):
            if obj.kind not in SHAPE_KINDS:
                raise ValidationError(f"object {i}: unknown kind {obj.kind!r}")
            r, c = obj.center
            if not (0 <= r < h and 0 <= c < w):
                raise ValidationError(f"object {i}: center {obj.center} outside the frame")
        if not 0 <= self.shadow.strength <= 1:
            raise ValidationError("shadow strength must lie in [0, 1]")

    @property
    def n_objects(self) -> int:
        return len(self.objects)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> SceneSpec:
        return cls(
            seed=int(d["seed"]),
            canvas=tuple(d["canvas"]),
            n_layers=int(d["n_layers"]),
            objects=tuple(_shape_from_dict(o) for o in d["objects"]),
            background=BackgroundSpec(
                style=d["background"]["style"],
                top_color=tuple(d["background"]["top_color"]),
                bottom_color=tuple(d["background"]["bottom_color"]),
                noise_amplitude=float(d["background"]["noise_amplitude"]),
                texture_seed=int(d["background"]["texture_seed"]),
            ),
            shadow=ShadowSpec(tuple(d["shadow"]["offset"]), float(d["shadow"]["strength"])),
        )


def _shape_from_dict(d: dict) -> ShapeSpec:
    return ShapeSpec(
        kind=d["kind"],
        center=tuple(d["center"]),
        scale=float(d["scale"]),
        aspect=float(d["aspect"]),
        rotation=float(d["rotation"]),
        color=tuple(d["color"]),
        noise_amplitude=float(d["noise_amplitude"]),
        texture_seed=int(d["texture_seed"]),
    )


@dataclass(frozen=True)
class Scene:
    spec: SceneSpec
    stack: LayerStack
    composite: np.ndarray
    panoptic: np.ndarray

    def __iter__(self):
        # unpacks as (stack, composite, panoptic)
        return iter((self.stack, self.composite, self.panoptic))


@dataclass
class PlacementConfig:
    """Knobs for random geometry. ``overlap_range`` bounds the pairwise overlap
    (intersection over the smaller shape) for every pair of objects."""

    scale_range: tuple[float, float] = (0.14, 0.26)  # fraction of min(H, W)
    margin: float = 0.12  # fraction of the frame kept clear of centers
    overlap_range: tuple[float, float] = (0.0, 0.75)
    noise_range: tuple[float, float] = (0.0, 0.06)
    min_color_contrast: float = 0.3
    shadow: ShadowSpec = field(default_factory=ShadowSpec)


def _pixel_grid(canvas: tuple[int, int]) -> tuple[np.ndarray, np.ndarray]:
    h, w = canvas
    return np.meshgrid(np.arange(h) + 0.5, np.arange(w) + 0.5, indexing="ij")


def rasterize(shape: ShapeSpec, canvas: tuple[int, int]) -> np.ndarray:
    """Binary (H, W) mask of a shape sampled at pixel centers."""
    rows, cols = _pixel_grid(canvas)
    dr, dc = rows - shape.center[0], cols - shape.center[1]
    cos, sin = np.cos(shape.rotation), np.sin(shape.rotation)
    u, v = cos * dc + sin * dr, -sin * dc + cos * dr
    if shape.kind == "disc":
        inside = dr**2 + dc**2 <= shape.scale**2
    elif shape.kind == "rectangle":
        inside = (np.abs(u) <= shape.scale) & (np.abs(v) <= shape.scale * shape.aspect)
    else:
        angles = shape.rotation + np.array([0.0, 2.0, 4.0]) * np.pi / 3 - np.pi / 2
        vr = shape.center[0] + 1.2 * shape.scale * np.sin(angles)
        vc = shape.center[1] + 1.2 * shape.scale * np.cos(angles)
        signs = []
        for a, b in ((0, 1), (1, 2), (2, 0)):
            signs.append((vc[b] - vc[a]) * (rows - vr[a]) - (vr[b] - vr[a]) * (cols - vc[a]))
        signs = np.stack(signs)
        inside = (signs >= 0).all(axis=0) | (signs <= 0).all(axis=0)
    return inside.astype(np.float64)


def value_noise(canvas: tuple[int, int], seed: int, cells: int = 4) -> np.ndarray:
    """Smooth noise in [-1, 1]: a coarse random grid upsampled bilinearly."""
    h, w = canvas
    grid = np.random.default_rng(seed).uniform(-1.0, 1.0, size=(cells + 1, cells + 1))
    r = np.linspace(0, cells, h)
    c = np.linspace(0, cells, w)
    r0 = np.minimum(r.astype(int), cells - 1)
    c0 = np.minimum(c.astype(int), cells - 1)
    fr, fc = (r - r0)[:, None], (c - c0)[None, :]
    g = grid
    return (
        g[r0][:, c0] * (1 - fr) * (1 - fc)
        + g[r0 + 1][:, c0] * fr * (1 - fc)
        + g[r0][:, c0 + 1] * (1 - fr) * fc
        + g[r0 + 1][:, c0 + 1] * fr * fc
    )


def _textured(color: Sequence[float], amplitude: float, canvas: tuple[int, int], seed: int) -> np.ndarray:
    base = np.broadcast_to(np.asarray(color, dtype=np.float64), (*canvas, 3))
    noise = value_noise(canvas, seed)[..., None] * amplitude
    return np.clip(base + noise, 0.0, 1.0)


def render_background(bg: BackgroundSpec, canvas: tuple[int, int]) -> np.ndarray:
    h, _ = canvas
    if bg.style == "flat":
        color = np.broadcast_to(np.asarray(bg.top_color), (*canvas, 3)).astype(np.float64)
    else:
        t = np.linspace(0.0, 1.0, h)[:, None, None]
        color = (1 - t) * np.asarray(bg.top_color) + t * np.asarray(bg.bottom_color)
        color = np.broadcast_to(color, (*canvas, 3))
    noise = value_noise(canvas, bg.texture_seed)[..., None] * bg.noise_amplitude
    return np.clip(color + noise, 0.0, 1.0)


def shadow_map(shape: ShapeSpec, shadow: ShadowSpec, canvas: tuple[int, int]) -> np.ndarray:
    """Elliptical shadow offset along the light direction, scaled by ``shadow.strength``."""
    rows, cols = _pixel_grid(canvas)
    cr = shape.center[0] + shadow.offset[0]
    cc = shape.center[1] + shadow.offset[1]
    a, b = 1.1 * shape.scale, 0.7 * shape.scale
    inside = ((cols - cc) / a) ** 2 + ((rows - cr) / b) ** 2 <= 1.0
    return inside.astype(np.float64) * shadow.strength


def render_scene(spec: SceneSpec) -> Scene:
    """Rasterize a spec without any rejection checks."""
    canvas = spec.canvas
    masks = [rasterize(obj, canvas) for obj in spec.objects]
    background = LayerImage(render_background(spec.background, canvas), np.ones(canvas))
    background = apply_shadows(background, [shadow_map(obj, spec.shadow, canvas) for obj in spec.objects])
    layers = [background]
    for obj, mask in zip(spec.objects, masks):
        color = _textured(obj.color, obj.noise_amplitude, canvas, obj.texture_seed)
        layers.append(LayerImage(color * mask[..., None] + 0.5 * (1 - mask[..., None]), mask))
    stack = LayerStack(tuple(layers)).padded(spec.n_layers)
    return Scene(spec, stack, composite(stack), panoptic_project(stack))


def _overlap(a: np.ndarray, b: np.ndarray) -> float:
    smaller = min(a.sum(), b.sum())
    return float((a * b).sum() / smaller) if smaller > 0 else 0.0


def _check_placement(spec: SceneSpec, config: PlacementConfig) -> int | None:
    """Return the index of the first object violating the placement rules."""
    masks = [rasterize(obj, spec.canvas) for obj in spec.objects]
    lo, hi = config.overlap_range
    for j in range(len(masks)):
        if masks[j].sum() == 0:
            return j
        for i in range(j):
            ov = _overlap(masks[i], masks[j])
            if not lo <= ov <= hi:
                return j
    stack = LayerStack.from_arrays(np.zeros((len(masks) + 1, *spec.canvas, 3)), np.stack([np.ones(spec.canvas), *masks]))
    for j in range(len(masks)):
        if layer_visibility(stack, j + 1).fraction < MIN_VISIBILITY:
            return j
    return None


def _random_color(rng: np.random.Generator) -> tuple[float, float, float]:
    return tuple(float(v) for v in rng.uniform(0.05, 0.95, size=3))


def _far_color(rng: np.random.Generator, avoid: Sequence[Sequence[float]], contrast: float) -> tuple[float, float, float]:
    color = _random_color(rng)
    for _ in range(50):
        if all(np.abs(np.subtract(color, a)).max() >= contrast for a in avoid):
            break
        color = _random_color(rng)
    return color


def _random_shape(rng: np.random.Generator, canvas: tuple[int, int], config: PlacementConfig,
                  avoid: Sequence[Sequence[float]]) -> ShapeSpec:
    h, w = canvas
    size = min(h, w)
    return ShapeSpec(
        kind=SHAPE_KINDS[int(rng.integers(len(SHAPE_KINDS)))],
        center=(float(rng.uniform(config.margin * h, (1 - config.margin) * h)),
                float(rng.uniform(config.margin * w, (1 - config.margin) * w))),
        scale=float(rng.uniform(*config.scale_range) * size),
        aspect=float(rng.uniform(0.5, 1.0)),
        rotation=float(rng.uniform(0, np.pi)),
        color=_far_color(rng, avoid, config.min_color_contrast),
        noise_amplitude=float(rng.uniform(*config.noise_range)),
        texture_seed=int(rng.integers(2**31)),
    )


def random_spec(seed: int, n_objects: int, canvas: tuple[int, int] = (32, 32), n_layers: int = 5,
                config: PlacementConfig | None = None) -> SceneSpec:
    """Draw a scene spec whose geometry satisfies the placement rules.

    Each object is resampled up to ``MAX_RESAMPLES`` times before giving up.
    """
    config = config or PlacementConfig()
    if not 0 <= n_objects <= n_layers - 1:
        raise ValidationError(f"n_objects must be in [0, {n_layers - 1}], got {n_objects}")
    rng = np.random.default_rng(seed)
    style = BACKGROUND_STYLES[int(rng.integers(len(BACKGROUND_STYLES)))]
    top = _random_color(rng)
    bottom = tuple(float(np.clip(v + rng.uniform(-0.25, 0.25), 0, 1)) for v in top)
    background = BackgroundSpec(style, top, bottom, float(rng.uniform(*config.noise_range)), int(rng.integers(2**31)))
    objects: list[ShapeSpec] = []
    for k in range(n_objects):
        for _ in range(MAX_RESAMPLES):
            candidate = _random_shape(rng, canvas, config, [top, bottom, *(o.color for o in objects)])
            trial = SceneSpec(seed, canvas, n_layers, tuple(objects) + (candidate,), background, config.shadow)
            if _check_placement(trial, config) is None:
                objects.append(candidate)
                break
        else:
            raise GenerationError(f"object {k} could not be placed within {MAX_RESAMPLES} resamples")
    return SceneSpec(seed, canvas, n_layers, tuple(objects), background, config.shadow)


def generate_scene(spec: SceneSpec, config: PlacementConfig | None = None) -> Scene:
    """Render ``spec``, resampling object placements that violate the occlusion rules.

    Offending objects keep their appearance and get a new center drawn from an
    rng seeded by ``spec.seed``.
    """
    config = config or PlacementConfig()
    rng = np.random.default_rng([spec.seed, 0x5EED])
    h, w = spec.canvas
    objects = list(spec.objects)
    current = spec
    for _ in range(MAX_RESAMPLES + 1):
        bad = _check_placement(current, config)
        if bad is None:
            return render_scene(current)
        objects[bad] = dataclasses.replace(
            objects[bad],
            center=(float(rng.uniform(config.margin * h, (1 - config.margin) * h)),
                    float(rng.uniform(config.margin * w, (1 - config.margin) * w))),
        )
        current = dataclasses.replace(current, objects=tuple(objects))
    raise GenerationError(f"object {bad} remains occluded or misplaced after {MAX_RESAMPLES} resamples")


def texture_variants(spec: SceneSpec, k: int, seed: int | None = None) -> list[SceneSpec]:
    """``k`` specs sharing geometry and order but with re-rolled colors and noise."""
    if k < 1:
        raise ValidationError("k must be at least 1")
    rng = np.random.default_rng([spec.seed, 0x7E47] if seed is None else seed)
    config = PlacementConfig()
    out = []
    for _ in range(k):
        top = _random_color(rng)
        bottom = tuple(float(np.clip(v + rng.uniform(-0.25, 0.25), 0, 1)) for v in top)
        bg = dataclasses.replace(spec.background, top_color=top, bottom_color=bottom,
                                 noise_amplitude=float(rng.uniform(*config.noise_range)),
                                 texture_seed=int(rng.integers(2**31)))
        objects = []
        for obj in spec.objects:
            objects.append(dataclasses.replace(
                obj,
                color=_far_color(rng, [top, bottom, *(o.color for o in objects)], config.min_color_contrast),
                noise_amplitude=float(rng.uniform(*config.noise_range)),
                texture_seed=int(rng.integers(2**31)),
            ))
        out.append(dataclasses.replace(spec, objects=tuple(objects), background=bg))
    return out


def scene_seed(dataset_seed: int, index: int) -> int:
    """Per-scene seed that depends only on (dataset seed, scene index)."""
    return int(np.random.SeedSequence([dataset_seed, index]).generate_state(1)[0])
