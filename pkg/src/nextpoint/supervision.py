"""Supervised losses: Gaussian-smoothed next-token loss and the latent mask loss."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .nn import log_softmax, sigmoid, softmax

DICE_SMOOTH = 1.0


@dataclass(frozen=True)
class LossReport:
    ntp: float
    covt: float
    total: float
    alpha: float


def soft_label(t_n: int, K: int, sigma: float) -> np.ndarray:
    """Discretized Gaussian over the K bins centered on ``t_n``; one-hot when sigma is 0."""
    if not 0 <= t_n < K:
        raise ValueError(f"target bin {t_n} outside [0, {K})")
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    probs = np.zeros(K)
    if sigma == 0:
        probs[t_n] = 1.0
        return probs
    k = np.arange(K)
    logits = -((k - t_n) ** 2) / (2.0 * sigma * sigma)
    probs = np.exp(logits - logits.max())
    return probs / probs.sum()


def soft_label_table(K: int, sigma: float) -> np.ndarray:
    """Row ``t`` is ``soft_label(t, K, sigma)``."""
    return np.stack([soft_label(t, K, sigma) for t in range(K)])


def target_distributions(targets: Sequence[int], V: int, K: int, sigma: float, table=None) -> np.ndarray:
    """Soft rows for coordinate targets, one-hot rows for everything else."""
    targets = np.asarray(targets, dtype=int)
    out = np.zeros((len(targets), V))
    coord = targets < K
    if coord.any():
        if table is None:
            table = soft_label_table(K, sigma)
        out[coord, :K] = table[targets[coord]]
    out[~coord, targets[~coord]] = 1.0
    return out


def soft_ntp_loss(logits: np.ndarray, targets: Sequence[int], K: int, sigma: float, weights=None):
    """Mean soft cross-entropy over supervised positions, and its gradient w.r.t. logits.

    ``logits`` is ``(N, V)``; ``targets`` holds N token ids.  ``weights`` (0/1 per
    position) selects the supervised positions; the mean runs over those only.
    """
    logits = np.asarray(logits, dtype=float)
    if logits.ndim != 2 or logits.shape[0] != len(targets):
        raise ValueError(f"{logits.shape[0]} logit rows for {len(targets)} targets")
    s = target_distributions(targets, logits.shape[1], K, sigma)
    w = np.ones(len(targets)) if weights is None else np.asarray(weights, dtype=float)
    n = max(w.sum(), 1.0)
    logp = log_softmax(logits)
    # 0 * log p terms vanish even where p underflows
    per_pos = -np.where(s > 0, s * logp, 0.0).sum(-1)
    loss = float((per_pos * w).sum() / n)
    grad = (softmax(logits) - s) * (w / n)[:, None]
    return loss, grad


def covt_loss(pred_logits: np.ndarray, gt_mask: np.ndarray):
    """Pixel-mean BCE plus smoothed Dice loss on sigmoid probabilities; returns (loss, dlogits)."""
    z = np.asarray(pred_logits, dtype=float)
    m = np.asarray(gt_mask, dtype=float)
    if z.shape != m.shape:
        raise ValueError(f"mask shape {z.shape} != {m.shape}")
    N = z.size
    p = sigmoid(z)
    # stable BCE with logits: max(z,0) - z*m + log(1 + exp(-|z|))
    bce = float((np.maximum(z, 0) - z * m + np.log1p(np.exp(-np.abs(z)))).sum() / N)
    inter = float((p * m).sum())
    denom = float(p.sum() + m.sum() + DICE_SMOOTH)
    dice = 1.0 - (2.0 * inter + DICE_SMOOTH) / denom
    d_bce = (p - m) / N
    d_dice_dp = -(2.0 * m * denom - (2.0 * inter + DICE_SMOOTH)) / (denom * denom)
    grad = d_bce + d_dice_dp * p * (1.0 - p)
    return bce + dice, grad


def sft_loss(ntp: float, covt: float, alpha: float) -> LossReport:
    if alpha < 0:
        raise ValueError("alpha must be non-negative")
    total = ntp if alpha == 0 else ntp + alpha * covt
    if not (math.isfinite(ntp) and math.isfinite(covt) and math.isfinite(total)):
        raise FloatingPointError("non-finite loss")
    return LossReport(float(ntp), float(covt), float(total), float(alpha))
