import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nextpoint.metrics import METRIC_KEYS, aji, detection_f1, evaluate_predictions, panoptic_quality
from nextpoint.reward import dm_reward, match_points
from nextpoint.scene import Point, SceneConfig, disc_mask, generate_scene


def _rect(y0, y1, x0, x1, shape=(20, 20)):
    m = np.zeros(shape, bool)
    m[y0:y1, x0:x1] = True
    return m


def aji_oracle(pred, gt):
    """Greedy AJI from a contingency table of label images."""
    shape = gt[0].shape
    lp, lg = np.zeros(shape, int), np.zeros(shape, int)
    for k, m in enumerate(pred, 1):
        lp[m] = k
    for k, m in enumerate(gt, 1):
        lg[m] = k
    table = np.zeros((len(gt) + 1, len(pred) + 1), int)
    np.add.at(table, (lg.ravel(), lp.ravel()), 1)
    area_p, area_g = table.sum(0)[1:], table.sum(1)[1:]
    inter = table[1:, 1:]
    iou = inter / np.maximum(area_g[:, None] + area_p[None, :] - inter, 1)
    iou[inter == 0] = -1
    used, num, den = set(), 0, 0
    for g in range(len(gt)):
        row = [(iou[g, k], -k) for k in range(len(pred)) if k not in used and iou[g, k] > 0]
        if not row:
            den += area_g[g]
            continue
        k = -max(row)[1]
        used.add(k)
        num += inter[g, k]
        den += area_g[g] + area_p[k] - inter[g, k]
    den += sum(area_p[k] for k in range(len(pred)) if k not in used)
    return num / den


def test_aji_examples():
    gt = _rect(0, 10, 0, 10)
    assert aji([gt], [gt]) == 1.0
    assert aji([_rect(0, 10, 0, 5)], [gt]) == pytest.approx(0.5)
    assert aji([_rect(12, 20, 12, 20)], [gt]) == 0.0
    assert aji([], [gt]) == 0.0
    assert aji([], []) == 1.0
    with pytest.raises(ValueError):
        aji([gt, _rect(5, 15, 5, 15)], [gt])


@settings(max_examples=80, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_aji_matches_contingency_oracle(seed):
    rng = np.random.default_rng(seed)
    s = generate_scene(SceneConfig(), int(seed % 5000))
    gt = s.instance_masks
    claimed = np.zeros((64, 64), bool)
    pred = []
    for _ in range(rng.integers(0, 8)):
        m = disc_mask(Point(*rng.uniform(0, 64, 2)), int(rng.integers(2, 7)), 64, 64) & ~claimed
        if m.any():
            claimed |= m
            pred.append(m)
    assert aji(pred, gt) == pytest.approx(aji_oracle(pred, gt), abs=1e-12)


def test_panoptic_quality_parts():
    gt = _rect(0, 10, 0, 10)
    q = panoptic_quality([_rect(0, 10, 0, 6)], [gt])
    assert q["pq"] == pytest.approx(0.6) and q["dq"] == 1.0 and q["sq"] == pytest.approx(0.6)
    q = panoptic_quality([_rect(0, 10, 0, 4)], [gt])
    assert q == {"pq": 0.0, "dq": 0.0, "sq": 0.0}


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 6), st.integers(0, 6), st.integers(0, 2**32 - 1))
def test_detection_f1_equals_reward(n, m, seed):
    rng = np.random.default_rng(seed)
    g = [Point(*xy) for xy in rng.uniform(0, 64, (m, 2))]
    p = [Point(q.x + rng.normal(0, 4), q.y + rng.normal(0, 4)) for q in g[:n]]
    p += [Point(*xy) for xy in rng.uniform(0, 64, (max(n - m, 0), 2))]
    det = detection_f1(p, g, 6.0)
    assert det["f1"] == dm_reward(match_points(p, g, 6.0))
    assert det["tp"] + det["fp"] == len(p) and det["tp"] + det["fn"] == len(g)


def test_oracle_predictions_score_one(tmp_path):
    scenes = [generate_scene(SceneConfig(), i) for i in range(10)]
    names = [f"s{i}" for i in range(10)]
    rep = evaluate_predictions(names, [s.centroids for s in scenes], scenes)
    assert rep.aggregates["f1"] == 1.0
    assert rep.aggregates["format_failures"] == 0
    assert rep.aggregates["pq"] > 0.85 and rep.aggregates["aji"] > 0.85
    rep.write(tmp_path, "eval_val")
    doc = json.loads((tmp_path / "eval_val.json").read_text())
    assert doc["aggregates"]["n_scenes"] == 10
    rows = (tmp_path / "eval_val.csv").read_text().splitlines()
    assert len(rows) == 11


def test_format_failures_score_zero():
    scenes = [generate_scene(SceneConfig(), i) for i in range(4)]
    preds = [scenes[0].centroids, None, scenes[2].centroids, None]
    rep = evaluate_predictions(list("abcd"), preds, scenes)
    assert rep.aggregates["format_failures"] == 2
    assert rep.aggregates["f1"] == 0.5
    assert all(rep.records[1][k] == 0.0 for k in METRIC_KEYS)


def test_empty_split_is_refused():
    with pytest.raises(ValueError):
        evaluate_predictions([], [], [])
