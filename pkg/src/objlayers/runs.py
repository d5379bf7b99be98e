"""Run-directory plumbing: multi-seed sampling over scenes and directory-level evaluation."""

from __future__ import annotations

import platform
import shutil
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import io
from .compositor import composite
from .dataset import MANIFEST, load_dataset
from .diffusion.checkpoint import file_hash, load_checkpoint
from .evaluation import aggregate, evaluate
from .errors import PersistenceError
from .guidance import GuidanceConfig, sample

SAMPLE_MANIFEST = "samples.json"
_MODEL_CACHE: dict = {}


def prepare_output(path: Path, overwrite: bool, is_dir: bool = True) -> None:
    """Refuse to write into an existing run unless ``overwrite`` is set."""
    path = Path(path)
    exists = path.exists() and (not is_dir or any(path.iterdir()))
    if exists and not overwrite:
        raise PersistenceError(f"{path} already exists; pass --overwrite to replace it")
    if exists and is_dir:
        shutil.rmtree(path)
    (path if is_dir else path.parent).mkdir(parents=True, exist_ok=True)


def environment_stamp() -> dict:
    return {
        "python": sys.version.split()[0],
        "platform": platform.platform(),
        "numpy": np.__version__,
        "torch": torch.__version__,
        "torch_threads": torch.get_num_threads(),
    }


def seed_dir(root: Path, seed: int) -> Path:
    return Path(root) / f"seed_{seed}"


def _model(ckpt: str):
    if ckpt not in _MODEL_CACHE:
        _MODEL_CACHE.clear()
        _MODEL_CACHE[ckpt] = load_checkpoint(Path(ckpt))
    return _MODEL_CACHE[ckpt]


def _sample_task(task: tuple) -> dict:
    ckpt, scene_id, image, seed, config, steps, out_root = task
    model, schedule, _ = _model(ckpt)
    schedule = schedule.with_inference_steps(steps)
    stack, trace = sample(model, image, config, schedule, seed)
    target = seed_dir(Path(out_root), seed) / scene_id
    io.write_stack(stack, target)
    io.write_json(target / "trace.json", trace.to_dict())
    comp = composite(stack)
    io.write_image(target / "composite.png", comp)
    return {"scene_id": scene_id, "seed": seed, "composite_mse": float(np.mean((comp - image) ** 2))}


def sample_scenes(ckpt: Path, scenes: Sequence[tuple[str, np.ndarray]], seeds: Sequence[int], config: GuidanceConfig,
                  steps: int, out_root: Path, jobs: int = 1) -> list[dict]:
    """Sample every (scene, seed) pair into ``out_root/seed_<s>/<scene_id>/``.

    Each task seeds its own noise and runs single-threaded, so outputs do not
    depend on ``jobs``.
    """
    tasks = [(str(ckpt), sid, img, int(s), config, steps, str(out_root)) for s in seeds for sid, img in scenes]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_sample_task, tasks))
    else:
        results = [_sample_task(t) for t in tasks]
    io.write_json(Path(out_root) / SAMPLE_MANIFEST, {
        "checkpoint": str(ckpt),
        "checkpoint_sha256": file_hash(ckpt),
        "seeds": [int(s) for s in seeds],
        "scenes": [sid for sid, _ in scenes],
        "guidance": config.to_dict(),
        "steps": steps,
        "results": results,
    })
    return results


def discover_runs(pred: Sequence[Path]) -> list[Path]:
    """Expand sampling roots into their ``seed_*`` run directories."""
    runs: list[Path] = []
    for p in pred:
        p = Path(p)
        seeds = sorted((d for d in p.glob("seed_*") if d.is_dir()), key=lambda d: int(d.name.split("_")[1]))
        runs.extend(seeds if seeds else [p])
    return runs


def evaluate_dirs(pred: Sequence[Path], truth_dir: Path) -> dict:
    """Score every truth scene that all prediction runs contain."""
    runs = discover_runs(pred)
    dataset = load_dataset(truth_dir)
    reports = []
    for rec in dataset.records:
        dirs = [r / rec.scene_id for r in runs]
        if not all((d / io.STACK_MANIFEST).exists() for d in dirs):
            continue
        preds = [io.read_stack(d) for d in dirs]
        reports.append(evaluate(preds, rec.scene.stack, rec.scene.composite, rec.scene_id))
    return {
        "runs": [str(r) for r in runs],
        "truth": str(truth_dir),
        "scenes": [r.to_dict() for r in reports],
        "aggregate": aggregate(reports),
    }


def is_dataset(path: Path) -> bool:
    return (Path(path) / MANIFEST).exists()
