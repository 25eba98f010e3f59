"""AdamW with decoupled weight decay over named numpy tensors."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .policy import PolicyParams


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


# norms, biases and embeddings are not decayed
def _decays(name: str) -> bool:
    leaf = name.split(".")[-1]
    return leaf in ("wq", "wk", "wv", "wo", "w1", "w2", "head_w", "patch_w")


def clip_by_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    norm = float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for g in grads.values():
            g *= scale
    return norm


def adamw_tensors(
    tensors: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
    weight_decay: float = 0.0,
    decays=_decays,
) -> dict[str, np.ndarray]:
    """Return updated copies of ``tensors``; ``state`` advances in place.

    Raises before touching anything if a gradient is missing, mis-shaped or non-finite.
    """
    for name, value in tensors.items():
        if name not in grads:
            raise ValueError(f"missing gradient for {name}")
        if grads[name].shape != value.shape:
            raise ValueError(f"gradient for {name} has shape {grads[name].shape}, expected {value.shape}")
        if not np.all(np.isfinite(grads[name])):
            raise FloatingPointError(f"non-finite gradient for {name}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    out = {}
    for name in sorted(tensors):
        w, g = tensors[name], grads[name]
        m = state.m.get(name, np.zeros_like(w))
        v = state.v.get(name, np.zeros_like(w))
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        state.m[name], state.v[name] = m, v
        new = w - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        if weight_decay and decays(name):
            new = new - lr * weight_decay * w
        out[name] = new
    return out


def update(
    params: PolicyParams,
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
    weight_decay: float = 0.0,
) -> PolicyParams:
    """One AdamW step producing a new parameter snapshot with a bumped version."""
    tensors = adamw_tensors(params.tensors, grads, state, lr, weight_decay)
    return PolicyParams(params.config, tensors, params.version + 1)
