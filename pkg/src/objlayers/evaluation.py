"""Layer matching, segmentation agreement and multi-seed reporting."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .compositor import LayerImage, LayerStack, composite, panoptic_project
from .errors import StructuralError


def layer_distance(a: LayerImage, b: LayerImage) -> float:
    """Gray-canvas RGB mean squared error plus (1 - IoU) of binarized alphas.

    Two empty layers have IoU 1 by convention, so empty vs. empty costs 0.
    """
    if a.shape != b.shape:
        raise StructuralError(f"layer shapes differ: {a.shape} vs {b.shape}")
    a, b = a.binarized(), b.binarized()
    mse = float(np.mean((a.on_gray() - b.on_gray()) ** 2))
    ma, mb = a.alpha > 0, b.alpha > 0
    union = int((ma | mb).sum())
    iou = 1.0 if union == 0 else int((ma & mb).sum()) / union
    return mse + (1.0 - iou)


def min_cost_assignment(cost: np.ndarray) -> tuple[np.ndarray, float]:
    """Exact minimum-cost assignment; ``cols[i]`` is the column given to row ``i``."""
    cost = np.asarray(cost, dtype=np.float64)
    rows, cols = linear_sum_assignment(cost)
    return cols[np.argsort(rows)], float(cost[rows, cols].sum())


@dataclass
class MatchResult:
    permutation: list[int]  # permutation[i] = predicted layer matched to true layer i
    distances: list[float]  # per true layer
    total: float


def hungarian_match(pred: LayerStack, truth: LayerStack) -> MatchResult:
    """Match predicted to true layers; the two backgrounds are paired by construction."""
    if len(pred) != len(truth):
        raise StructuralError(f"stacks must be padded to the same length ({len(pred)} vs {len(truth)})")
    n = len(truth)
    cost = np.array([[layer_distance(truth[i], pred[j]) for j in range(1, n)] for i in range(1, n)]).reshape(n - 1, n - 1)
    cols, _ = min_cost_assignment(cost) if n > 1 else (np.array([], dtype=int), 0.0)
    perm = [0] + [int(c) + 1 for c in cols]
    dist = [layer_distance(truth[0], pred[0])] + [float(cost[i, c]) for i, c in enumerate(cols)]
    return MatchResult(perm, dist, float(sum(dist)))


def _comb2(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x * (x - 1) / 2.0


def ari(pred: np.ndarray, truth: np.ndarray) -> float:
    """Adjusted Rand index over pixels, background label included.

    When the expected and maximum index coincide the score is 1 for identical
    partitions and 0 otherwise.
    """
    pred = np.asarray(pred).ravel()
    truth = np.asarray(truth).ravel()
    if pred.shape != truth.shape:
        raise StructuralError("label maps differ in size")
    _, p_idx = np.unique(pred, return_inverse=True)
    _, t_idx = np.unique(truth, return_inverse=True)
    table = np.zeros((t_idx.max(initial=-1) + 1, p_idx.max(initial=-1) + 1), dtype=np.int64)
    np.add.at(table, (t_idx, p_idx), 1)
    index = _comb2(table).sum()
    a = _comb2(table.sum(axis=1)).sum()
    b = _comb2(table.sum(axis=0)).sum()
    total = _comb2(len(pred))
    expected = a * b / total if total > 0 else 0.0
    maximum = 0.5 * (a + b)
    if maximum == expected:
        same = (table > 0).sum(axis=0).max(initial=0) <= 1 and (table > 0).sum(axis=1).max(initial=0) <= 1
        return 1.0 if same else 0.0
    return float((index - expected) / (maximum - expected))


@dataclass
class RunScore:
    seed_index: int
    match: MatchResult
    ari: float
    composite_mse: float


@dataclass
class EvalReport:
    scene_id: str
    runs: list[RunScore] = field(default_factory=list)

    @property
    def distances(self) -> list[float]:
        return [r.match.total for r in self.runs]

    @property
    def aris(self) -> list[float]:
        return [r.ari for r in self.runs]

    @property
    def composite_mses(self) -> list[float]:
        return [r.composite_mse for r in self.runs]

    def summary(self) -> dict:
        return {
            "distance_best": min(self.distances),
            "distance_mean": float(np.mean(self.distances)),
            "ari_best": max(self.aris),
            "ari_mean": float(np.mean(self.aris)),
            "composite_mse_best": min(self.composite_mses),
            "composite_mse_mean": float(np.mean(self.composite_mses)),
        }

    def to_dict(self) -> dict:
        return {"scene_id": self.scene_id, "runs": [asdict(r) for r in self.runs], **self.summary()}


def evaluate(pred_runs: Sequence[LayerStack], truth: LayerStack, image: np.ndarray, scene_id: str = "") -> EvalReport:
    """Score K predicted stacks (one per seed) against the truth."""
    if not pred_runs:
        raise StructuralError("need at least one predicted run")
    truth_labels = panoptic_project(truth)
    report = EvalReport(scene_id)
    for k, pred in enumerate(pred_runs):
        match = hungarian_match(pred, truth)
        mse = float(np.mean((composite(pred) - np.asarray(image)) ** 2))
        report.runs.append(RunScore(k, match, ari(panoptic_project(pred), truth_labels), mse))
    return report


AGGREGATE_KEYS = ("distance_best", "distance_mean", "ari_best", "ari_mean", "composite_mse_best", "composite_mse_mean")


def aggregate(reports: Sequence[EvalReport]) -> dict:
    """Scene-averaged best-of-K and mean-over-K statistics."""
    if not reports:
        return {k: None for k in AGGREGATE_KEYS} | {"n_scenes": 0}
    summaries = [r.summary() for r in reports]
    out = {k: float(np.mean([s[k] for s in summaries])) for k in AGGREGATE_KEYS}
    out["n_scenes"] = len(reports)
    return out
