"""Rollout rewards: Hungarian-matched detection F1, a point-prompted toy segmenter and PQ."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .scene import Point, Scene


@dataclass(frozen=True)
class MatchResult:
    pairs: tuple[tuple[int, int, float], ...]  # (pred, gt, distance)
    tp_pred: frozenset[int]
    fp_pred: frozenset[int]
    fn_gt: frozenset[int]
    r_thresh: float
    n_pred: int
    n_gt: int

    @property
    def tp(self) -> int:
        return len(self.tp_pred)

    @property
    def fp(self) -> int:
        return len(self.fp_pred)

    @property
    def fn(self) -> int:
        return len(self.fn_gt)


@dataclass(frozen=True)
class RewardConfig:
    r_thresh: float = 6.0
    gamma: float = 0.0
    use_pq: bool = False
    fg_threshold: float = 0.25
    seg_cap: float = 7.0

    def validate(self) -> None:
        if self.r_thresh <= 0:
            raise ValueError("r_thresh must be positive")
        if self.gamma < 0:
            raise ValueError("gamma must be non-negative")
        if self.seg_cap <= 0:
            raise ValueError("seg_cap must be positive")


@dataclass(frozen=True)
class RewardBreakdown:
    r_dm: float
    r_pq: float
    gamma: float
    r_total: float
    format_ok: bool
    match: MatchResult | None = None
    segmenter_calls: int = 0


def distance_matrix(pred: Sequence[Point], gt: Sequence[Point]) -> np.ndarray:
    p = np.asarray(pred, dtype=float).reshape(-1, 2)
    g = np.asarray(gt, dtype=float).reshape(-1, 2)
    return np.sqrt(((p[:, None, :] - g[None, :, :]) ** 2).sum(-1))


def _optimal_cost(cost: np.ndarray) -> float:
    if cost.size == 0:
        return 0.0
    rows, cols = linear_sum_assignment(cost)
    return float(cost[rows, cols].sum())


def assign(cost: np.ndarray) -> list[tuple[int, int]]:
    """Min-cost assignment of size ``min(n, m)``, lexicographically smallest among optima.

    Rows are visited in index order and each takes the lowest column (or no column,
    ranked last) that still admits an optimal completion.
    """
    n, m = cost.shape
    if n == 0 or m == 0:
        return []
    best = _optimal_cost(cost)
    tol = 1e-9 * (1.0 + abs(best))
    rows_left = list(range(n))
    cols_left = list(range(m))
    spent = 0.0
    out = []
    for i in range(n):
        rows_left.remove(i)
        need = min(n, m) - len(out)
        if need == 0:
            break
        for j in cols_left + [None]:
            if j is None:
                # leaving row i unmatched is only possible if enough rows remain
                if len(rows_left) < need:
                    continue
                rest = _optimal_cost(cost[np.ix_(rows_left, cols_left)])
                if spent + rest <= best + tol:
                    break
                continue
            cols = [c for c in cols_left if c != j]
            rest = _optimal_cost(cost[np.ix_(rows_left, cols)]) if rows_left and cols else 0.0
            if spent + cost[i, j] + rest <= best + tol:
                out.append((i, j))
                spent += cost[i, j]
                cols_left = cols
                break
    return out


def hungarian_match(pred: Sequence[Point], gt: Sequence[Point]) -> list[tuple[int, int, float]]:
    """Optimal pred-to-gt pairing under Euclidean distance, as ``(pred, gt, distance)``."""
    cost = distance_matrix(pred, gt)
    return [(i, j, float(cost[i, j])) for i, j in assign(cost)]


def classify_matches(pairs, n_pred: int, n_gt: int, r_thresh: float) -> MatchResult:
    """Matched pairs within ``r_thresh`` are TP; every other prediction is FP."""
    if r_thresh <= 0:
        raise ValueError("r_thresh must be positive")
    tp = frozenset(i for i, _, dist in pairs if dist <= r_thresh)
    hit_gt = {j for i, j, dist in pairs if dist <= r_thresh}
    return MatchResult(
        pairs=tuple(pairs),
        tp_pred=tp,
        fp_pred=frozenset(range(n_pred)) - tp,
        fn_gt=frozenset(range(n_gt)) - hit_gt,
        r_thresh=float(r_thresh),
        n_pred=n_pred,
        n_gt=n_gt,
    )


def match_points(pred: Sequence[Point], gt: Sequence[Point], r_thresh: float) -> MatchResult:
    return classify_matches(hungarian_match(pred, gt), len(pred), len(gt), r_thresh)


def precision_recall_f1(match: MatchResult) -> tuple[float, float, float]:
    if match.n_pred == 0 and match.n_gt == 0:
        return 1.0, 1.0, 1.0
    if match.tp == 0:
        return 0.0, 0.0, 0.0
    precision = match.tp / (match.tp + match.fp)
    recall = match.tp / (match.tp + match.fn)
    return precision, recall, 2 * precision * recall / (precision + recall)


def dm_reward(match: MatchResult) -> float:
    return precision_recall_f1(match)[2]


def toy_segment(points: Sequence[Point], scene: Scene, fg_threshold: float = 0.25, cap: float = 7.0) -> list[np.ndarray]:
    """Split thresholded foreground among prompts by nearest prompt within ``cap`` pixels.

    Equidistant pixels go to the lower prompt index, so masks are disjoint.
    """
    H, W = scene.intensity.shape
    if not points:
        return []
    fg = scene.intensity > fg_threshold
    ys, xs = np.mgrid[0:H, 0:W]
    pts = np.asarray(points, dtype=float)
    dist = np.sqrt((xs[None] + 0.5 - pts[:, 0, None, None]) ** 2 + (ys[None] + 0.5 - pts[:, 1, None, None]) ** 2)
    owner = dist.argmin(0)  # first minimum = lowest index
    near = dist.min(0) <= cap
    return [fg & near & (owner == k) for k in range(len(points))]


def iou_matrix(pred: Sequence[np.ndarray], gt: Sequence[np.ndarray]) -> np.ndarray:
    if not pred or not gt:
        return np.zeros((len(pred), len(gt)))
    p = np.stack(pred).reshape(len(pred), -1).astype(float)
    g = np.stack(gt).reshape(len(gt), -1).astype(float)
    inter = p @ g.T
    union = p.sum(1)[:, None] + g.sum(1)[None, :] - inter
    return np.where(union > 0, inter / np.maximum(union, 1), 0.0)


def pq_parts(pred: Sequence[np.ndarray], gt: Sequence[np.ndarray]) -> tuple[float, float, float]:
    """``(pq, dq, sq)`` with IoU > 0.5 matching; empty predicted masks are ignored."""
    pred = [m for m in pred if m.any()]
    gt = [m for m in gt if m.any()]
    if not pred and not gt:
        return 1.0, 1.0, 1.0
    iou = iou_matrix(pred, gt)
    matched = iou[iou > 0.5]  # IoU > 0.5 pairs are automatically one-to-one
    tp = len(matched)
    fp, fn = len(pred) - tp, len(gt) - tp
    if tp == 0:
        return 0.0, 0.0, 0.0
    dq = tp / (tp + 0.5 * fp + 0.5 * fn)
    sq = float(matched.sum()) / tp
    return dq * sq, dq, sq


def pq_reward(pred: Sequence[np.ndarray], gt: Sequence[np.ndarray]) -> float:
    return pq_parts(pred, gt)[0]


def rollout_reward(rollout, scene: Scene, config: RewardConfig) -> RewardBreakdown:
    """Format-gated ``r_dm + gamma * r_pq``; the segmenter only runs when PQ is enabled."""
    if not rollout.format_ok:
        return RewardBreakdown(0.0, 0.0, config.gamma, 0.0, False)
    points = list(rollout.parsed.points)
    match = match_points(points, scene.centroids, config.r_thresh)
    r_dm = dm_reward(match)
    r_pq, calls = 0.0, 0
    if config.use_pq:
        masks = toy_segment(points, scene, config.fg_threshold, config.seg_cap)
        r_pq, calls = pq_reward(masks, scene.instance_masks), 1
    return RewardBreakdown(r_dm, r_pq, config.gamma, r_dm + config.gamma * r_pq, True, match, calls)
