"""Evaluation metrics over a dataset split: detection F1, PQ/DQ/SQ and AJI."""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .policy import PolicyParams, greedy_decode
from .reward import match_points, pq_parts, precision_recall_f1, toy_segment
from .scene import Point, Scene

METRIC_KEYS = ("f1", "precision", "recall", "pq", "dq", "sq", "aji")


def detection_f1(pred: Sequence[Point], gt: Sequence[Point], r_thresh: float) -> dict:
    """Shares the reward's matching, so ``f1`` is bit-identical to ``dm_reward``."""
    match = match_points(pred, gt, r_thresh)
    p, r, f1 = precision_recall_f1(match)
    return {"f1": f1, "precision": p, "recall": r, "tp": match.tp, "fp": match.fp, "fn": match.fn}


def panoptic_quality(pred: Sequence[np.ndarray], gt: Sequence[np.ndarray]) -> dict:
    pq, dq, sq = pq_parts(pred, gt)
    return {"pq": pq, "dq": dq, "sq": sq}


def aji(pred: Sequence[np.ndarray], gt: Sequence[np.ndarray]) -> float:
    """Aggregated Jaccard index with greedy best-IoU assignment in gt order.

    A gt with no overlapping unused prediction adds only its own area to the union.
    Predicted masks must be pairwise disjoint.
    """
    pred = [np.asarray(m, dtype=bool) for m in pred]
    gt = [np.asarray(m, dtype=bool) for m in gt if np.any(m)]
    if pred:
        if (np.stack(pred).sum(0) > 1).any():
            raise ValueError("predicted instance masks overlap")
    if not gt:
        return 1.0 if not any(m.any() for m in pred) else 0.0
    used = np.zeros(len(pred), dtype=bool)
    inter_sum = 0
    union_sum = 0
    for g in gt:
        best, best_iou = -1, 0.0
        for k, p in enumerate(pred):
            if used[k]:
                continue
            inter = np.logical_and(g, p).sum()
            if inter == 0:
                continue
            iou = inter / np.logical_or(g, p).sum()
            if iou > best_iou:
                best, best_iou = k, iou
        if best < 0:
            union_sum += int(g.sum())
            continue
        used[best] = True
        inter_sum += int(np.logical_and(g, pred[best]).sum())
        union_sum += int(np.logical_or(g, pred[best]).sum())
    union_sum += int(sum(p.sum() for p, u in zip(pred, used) if not u))
    return inter_sum / union_sum if union_sum else 1.0


@dataclass
class EvalReport:
    records: list[dict]
    aggregates: dict
    config: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    def write(self, out_dir: str | Path, stem: str = "eval") -> tuple[Path, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        js = out / f"{stem}.json"
        js.write_text(self.to_json())
        tab = out / f"{stem}.csv"
        cols = ["scene", "format_ok", "n_pred", "n_gt", *METRIC_KEYS]
        with open(tab, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=cols, extrasaction="ignore", lineterminator="\n")
            w.writeheader()
            for rec in self.records:
                w.writerow({k: (f"{rec[k]:.12g}" if isinstance(rec[k], float) else rec[k]) for k in cols})
        return js, tab


def score_scene(name: str, points: Sequence[Point] | None, scene: Scene, r_thresh: float, fg_threshold: float = 0.25, seg_cap: float = 7.0) -> dict:
    """Metrics for one scene; ``points=None`` marks a format failure and scores zero."""
    n_gt = len(scene.instances)
    if points is None:
        rec = {k: 0.0 for k in METRIC_KEYS}
        return {"scene": name, "format_ok": False, "n_pred": 0, "n_gt": n_gt, **rec}
    det = detection_f1(points, scene.centroids, r_thresh)
    masks = toy_segment(points, scene, fg_threshold, seg_cap)
    pq = panoptic_quality(masks, scene.instance_masks)
    return {
        "scene": name,
        "format_ok": True,
        "n_pred": len(points),
        "n_gt": n_gt,
        "f1": det["f1"],
        "precision": det["precision"],
        "recall": det["recall"],
        **pq,
        "aji": aji(masks, scene.instance_masks),
    }


def aggregate(records: list[dict]) -> dict:
    if not records:
        raise ValueError("cannot aggregate an empty split")
    out = {k: float(np.mean([r[k] for r in records])) for k in METRIC_KEYS}
    out["n_scenes"] = len(records)
    out["format_failures"] = sum(not r["format_ok"] for r in records)
    return out


def evaluate_predictions(names: Sequence[str], predictions: Sequence[Sequence[Point] | None], scenes: Sequence[Scene], r_thresh: float = 6.0) -> EvalReport:
    if not scenes:
        raise ValueError("split is empty")
    records = [score_scene(n, p, s, r_thresh) for n, p, s in zip(names, predictions, scenes)]
    return EvalReport(records, aggregate(records), {"r_thresh": r_thresh, "iou_rule": "iou > 0.5"})


def evaluate_split(params: PolicyParams, names: Sequence[str], scenes: Sequence[Scene], r_thresh: float = 6.0, batch: int = 64) -> EvalReport:
    """Greedy-decode every scene, then score points and toy-segmenter masks."""
    preds = []
    for i in range(0, len(scenes), batch):
        for r in greedy_decode(params, list(scenes[i : i + batch])):
            preds.append(list(r.parsed.points) if r.format_ok else None)
    return evaluate_predictions(names, preds, scenes, r_thresh)
