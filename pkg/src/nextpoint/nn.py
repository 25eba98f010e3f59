"""Numpy layers with hand-written backward passes.

Every ``*_fwd`` returns ``(out, cache)`` and the matching ``*_bwd`` maps the upstream
gradient and cache to input (and parameter) gradients.
"""
from __future__ import annotations

import math

import numpy as np

NEG_INF = -1e30
_GELU_C = math.sqrt(2.0 / math.pi)


def softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    z = z - z.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def layernorm_fwd(x, g, b, eps=1e-5):
    mu = x.mean(-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xh = xc * rstd
    return xh * g + b, (xh, rstd, g)


def layernorm_bwd(dy, cache):
    xh, rstd, g = cache
    red = tuple(range(dy.ndim - 1))
    dg = (dy * xh).sum(axis=red)
    db = dy.sum(axis=red)
    dxh = dy * g
    dx = rstd * (dxh - dxh.mean(-1, keepdims=True) - xh * (dxh * xh).mean(-1, keepdims=True))
    return dx, dg, db


def gelu_fwd(x):
    t = np.tanh(_GELU_C * x * (1.0 + 0.044715 * x * x))
    return 0.5 * x * (1.0 + t), (x, t)


def gelu_bwd(dy, cache):
    x, t = cache
    dt = (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * x * x)
    return dy * (0.5 * (1.0 + t) + 0.5 * x * dt)


def linear_bwd(dy, x, w):
    """Gradients of ``y = x @ w (+ b)`` for inputs of any leading shape."""
    d_in = w.shape[0]
    dw = x.reshape(-1, d_in).T @ dy.reshape(-1, w.shape[1])
    db = dy.reshape(-1, w.shape[1]).sum(0)
    return dy @ w.T, dw, db


def attention_fwd(x, wq, wk, wv, wo, n_heads, bias):
    """Multi-head self-attention; ``bias`` is an additive (S, S) mask."""
    B, S, d = x.shape
    dh = d // n_heads

    def split(t):
        return t.reshape(B, S, n_heads, dh).transpose(0, 2, 1, 3)

    q, k, v = split(x @ wq), split(x @ wk), split(x @ wv)
    scale = 1.0 / math.sqrt(dh)
    a = softmax(q @ k.transpose(0, 1, 3, 2) * scale + bias)
    o = (a @ v).transpose(0, 2, 1, 3).reshape(B, S, d)
    return o @ wo, (x, q, k, v, a, o, scale)


def attention_bwd(dy, cache, wq, wk, wv, wo):
    x, q, k, v, a, o, scale = cache
    B, nh, S, dh = q.shape
    d = nh * dh
    do, dwo, _ = linear_bwd(dy, o, wo)
    do = do.reshape(B, S, nh, dh).transpose(0, 2, 1, 3)
    da = do @ v.transpose(0, 1, 3, 2)
    dv = a.transpose(0, 1, 3, 2) @ do
    ds = a * (da - (da * a).sum(-1, keepdims=True)) * scale
    dq = ds @ k
    dk = ds.transpose(0, 1, 3, 2) @ q

    def merge(t):
        return t.transpose(0, 2, 1, 3).reshape(B, S, d)

    dq, dk, dv = merge(dq), merge(dk), merge(dv)
    x2 = x.reshape(-1, d)
    dwq = x2.T @ dq.reshape(-1, d)
    dwk = x2.T @ dk.reshape(-1, d)
    dwv = x2.T @ dv.reshape(-1, d)
    dx = dq @ wq.T + dk @ wk.T + dv @ wv.T
    return dx, dwq, dwk, dwv, dwo
