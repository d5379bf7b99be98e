"""Writing and loading generated scene datasets."""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import io
from .compositor import LayerStack
from .errors import ValidationError
from .scenegen import Scene, SceneSpec, generate_scene, random_spec, scene_seed, texture_variants

MANIFEST = "manifest.json"


@dataclass(frozen=True)
class SceneRecord:
    scene_id: str
    split: str
    scene: Scene


@dataclass(frozen=True)
class Dataset:
    records: tuple[SceneRecord, ...]
    n_layers: int
    canvas: tuple[int, int]
    seed: int

    def __len__(self) -> int:
        return len(self.records)

    def split(self, name: str) -> list[SceneRecord]:
        return [r for r in self.records if r.split == name]

    def stacks(self, split: str | None = None) -> list[LayerStack]:
        return [r.scene.stack for r in self.records if split is None or r.split == split]


def _object_count(seed: int, index: int, lo: int, hi: int) -> int:
    return int(np.random.default_rng([seed, index, 1]).integers(lo, hi + 1))


def _build(args: tuple) -> Scene:
    seed, index, lo, hi, canvas, n_layers, n_textures = args
    geometry = index // n_textures
    spec = random_spec(scene_seed(seed, geometry), _object_count(seed, geometry, lo, hi), canvas, n_layers)
    if n_textures > 1:
        spec = texture_variants(spec, n_textures)[index % n_textures]
    return generate_scene(spec)


def scene_id(index: int) -> str:
    return f"scene_{index:05d}"


def write_scene(scene: Scene, directory: Path) -> None:
    io.write_stack(scene.stack, directory)
    io.write_image(directory / "composite.png", scene.composite)
    io.write_labels(directory / "panoptic.png", scene.panoptic)


def generate_dataset(
    n_scenes: int,
    object_count_range: tuple[int, int],
    seed: int,
    out_dir: Path | None = None,
    canvas: tuple[int, int] = (32, 32),
    n_layers: int = 5,
    n_textures: int = 1,
    holdout: int | None = None,
    jobs: int = 1,
) -> Dataset:
    """Generate ``n_scenes`` scenes; the last ``holdout`` scenes form the ``val`` split.

    Scene ``i`` depends only on ``(seed, i)``, so results do not depend on ``jobs``.
    With ``n_textures > 1`` consecutive scenes share geometry and differ in texture.
    """
    lo, hi = object_count_range
    if lo < 0 or hi > n_layers - 1 or lo > hi:
        raise ValidationError(f"object count range {object_count_range} invalid for {n_layers} layers")
    if n_scenes < 0:
        raise ValidationError("n_scenes must be non-negative")
    holdout = round(n_scenes / 9) if holdout is None else holdout
    tasks = [(seed, i, lo, hi, tuple(canvas), n_layers, n_textures) for i in range(n_scenes)]
    if jobs > 1 and n_scenes > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            scenes = list(pool.map(_build, tasks, chunksize=max(1, n_scenes // (4 * jobs))))
    else:
        scenes = [_build(t) for t in tasks]
    records = tuple(
        SceneRecord(scene_id(i), "val" if i >= n_scenes - holdout else "train", s) for i, s in enumerate(scenes)
    )
    dataset = Dataset(records, n_layers, tuple(canvas), seed)
    if out_dir is not None:
        write_dataset(dataset, Path(out_dir))
    return dataset


def write_dataset(dataset: Dataset, out_dir: Path) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for rec in dataset.records:
        write_scene(rec.scene, out_dir / rec.scene_id)
        entries.append({"id": rec.scene_id, "dir": rec.scene_id, "split": rec.split,
                        "n_objects": rec.scene.spec.n_objects, "spec": rec.scene.spec.to_dict()})
    h, w = dataset.canvas
    io.write_json(out_dir / MANIFEST, {"n_scenes": len(entries), "n_layers": dataset.n_layers, "height": h,
                                       "width": w, "seed": dataset.seed, "scenes": entries})


def load_dataset(directory: Path) -> Dataset:
    directory = Path(directory)
    meta = io.read_json(directory / MANIFEST)
    records = []
    for entry in meta["scenes"]:
        d = directory / entry["dir"]
        scene = Scene(SceneSpec.from_dict(entry["spec"]), io.read_stack(d), io.read_image(d / "composite.png"),
                      io.read_labels(d / "panoptic.png"))
        records.append(SceneRecord(entry["id"], entry["split"], scene))
    return Dataset(tuple(records), int(meta["n_layers"]), (int(meta["height"]), int(meta["width"])), int(meta["seed"]))


def default_jobs(jobs: int | None = None) -> int:
    if jobs is not None:
        return max(1, jobs)
    return max(1, int(os.environ.get("COBL_SANDBOX_JOBS", "1")))
