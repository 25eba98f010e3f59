"""Teacher-forced training with soft coordinate targets and the latent mask loss."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .decoder import FrozenMaskDecoder, covt_loss_and_grad
from .metrics import evaluate_split
from .grpo import RftConfig, grpo_step
from .optim import AdamState, clip_by_global_norm, update
from .policy import PolicyParams, backward, forward, patchify
from .scene import Instance, Point, Scene, foreground_mask
from .supervision import sft_loss, soft_ntp_loss
from .tokenizer import encode_points


@dataclass(frozen=True)
class SftConfig:
    sigma: float = 1.0
    alpha: float = 0.1
    lr: float = 5e-3
    steps: int = 2000
    batch: int = 32
    warmup: int = 100
    weight_decay: float = 0.01
    grad_clip: float = 1.0
    augment: bool = True
    eval_every: int = 250

    def validate(self) -> None:
        if self.sigma < 0 or self.alpha < 0:
            raise ValueError("sigma and alpha must be non-negative")
        if self.lr <= 0 or self.batch < 1 or self.steps < 0 or self.warmup < 0:
            raise ValueError("lr and batch must be positive, steps and warmup non-negative")
        if self.weight_decay < 0 or self.grad_clip < 0 or self.eval_every < 0:
            raise ValueError("weight_decay, grad_clip and eval_every must be non-negative")


def lr_at(step: int, base: float, warmup: int, total: int) -> float:
    """Linear warmup then cosine decay to zero."""
    if step < warmup:
        return base * (step + 1) / warmup
    span = max(total - warmup, 1)
    return base * 0.5 * (1.0 + math.cos(math.pi * min(step - warmup, span) / span))


def dihedral(scene: Scene, k: int) -> Scene:
    """One of the 8 square symmetries: ``k & 3`` quarter turns, then a mirror if ``k & 4``."""
    W, H = scene.width, scene.height
    if W != H and k & 1:
        raise ValueError("quarter turns need a square scene")

    def img(a):
        a = np.rot90(a, k & 3)
        return np.ascontiguousarray(a[:, ::-1] if k & 4 else a)

    def pt(p):
        x, y = p
        for _ in range(k & 3):
            # np.rot90 turns counter-clockwise: new (x, y) = (y, W - x)
            x, y = y, W - x
        if k & 4:
            x = W - x
        return Point(x, y)

    insts = [Instance(pt(i.centroid), img(i.mask), i.radius) for i in scene.instances]
    return Scene(W, H, img(scene.intensity), insts, scene.seed)


def make_batch(scenes: list[Scene], config) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Patches ``(B, P, p*p)``, EOS-padded ids ``(B, T)`` and the per-row supervision mask."""
    cfg = config
    seqs = [encode_points(s.centroids, cfg.width, cfg.height, cfg.K, cfg.L).ids for s in scenes]
    T = max(len(q) for q in seqs)
    if T > cfg.max_len:
        raise ValueError(f"target of {T} tokens exceeds max_len={cfg.max_len}")
    ids = np.full((len(scenes), T), cfg.vocab.EOS, dtype=int)
    # row j of the logits scores token j + 1; the BOS/latent prefix is forced
    weights = np.zeros((len(scenes), T - 1))
    for b, q in enumerate(seqs):
        ids[b, : len(q)] = q
        weights[b, cfg.L : len(q) - 1] = 1.0
    patches = np.stack([patchify(s.intensity, cfg.patch) for s in scenes])
    return patches, ids, weights


def sft_gradient(params: PolicyParams, scenes: list[Scene], sigma: float, alpha: float, frozen: FrozenMaskDecoder | None):
    """Loss report and parameter gradients of ``ntp + alpha * covt`` on one batch."""
    cfg = params.config
    patches, ids, weights = make_batch(scenes, cfg)
    B, T = ids.shape
    logits, hf, cache = forward(params, patches, ids, keep_cache=True)
    V = logits.shape[-1]
    ntp, drows = soft_ntp_loss(logits[:, :-1].reshape(-1, V), ids[:, 1:].reshape(-1), cfg.K, sigma, weights.reshape(-1))
    dlogits = np.zeros_like(logits)
    dlogits[:, :-1] = drows.reshape(B, T - 1, V)
    dhidden = None
    covt = 0.0
    if alpha > 0 and cfg.L > 0:
        if frozen is None:
            raise ValueError("the latent mask loss needs a frozen decoder")
        dhidden = np.zeros_like(hf)
        for b, s in enumerate(scenes):
            loss, dlat = covt_loss_and_grad(frozen, hf[b, 1 : 1 + cfg.L], s.intensity, foreground_mask(s))
            covt += loss / B
            dhidden[b, 1 : 1 + cfg.L] = alpha * dlat / B
    report = sft_loss(ntp, covt, alpha)
    return report, backward(params, cache, dlogits, dhidden)


def sft_step(params, state, scenes, config: SftConfig, step: int, frozen=None):
    report, grads = sft_gradient(params, scenes, config.sigma, config.alpha, frozen)
    norm = clip_by_global_norm(grads, config.grad_clip)
    lr = lr_at(step, config.lr, config.warmup, config.steps)
    new = update(params, grads, state, lr, config.weight_decay)
    return new, {"loss": report.total, "ntp": report.ntp, "covt": report.covt, "lr": lr, "grad_norm": norm}


def step_batch(train: list[Scene], config: SftConfig, seed: int, step: int) -> list[Scene]:
    """The batch for ``step`` depends only on ``(seed, step)``, so resumed runs replay exactly."""
    rng = np.random.default_rng([seed, step])
    idx = rng.integers(0, len(train), config.batch)
    ks = rng.integers(0, 8, config.batch) if config.augment else np.zeros(config.batch, dtype=int)
    return [dihedral(train[i], int(k)) for i, k in zip(idx, ks)]


def train_sft(
    params: PolicyParams,
    state: AdamState,
    train: list[Scene],
    val: list[Scene],
    config: SftConfig,
    seed: int,
    frozen: FrozenMaskDecoder | None = None,
    start_step: int = 0,
    stop_step: int | None = None,
    log: Callable[[dict], None] | None = None,
    r_thresh: float = 6.0,
):
    """Run steps ``[start_step, stop_step)`` of the schedule; returns the final params."""
    config.validate()
    stop = config.steps if stop_step is None else min(stop_step, config.steps)
    for step in range(start_step, stop):
        params, rec = sft_step(params, state, step_batch(train, config, seed, step), config, step, frozen)
        if not math.isfinite(rec["loss"]):
            raise FloatingPointError(f"non-finite loss at step {step}")
        rec = {"step": step, **rec}
        last = step + 1 == config.steps
        if val and config.eval_every and ((step + 1) % config.eval_every == 0 or last):
            rec["val_f1"] = _val_f1(params, val, r_thresh)
        if log is not None:
            log(rec)
    return params


def _val_f1(params, val, r_thresh):
    return evaluate_split(params, [str(i) for i in range(len(val))], val, r_thresh).aggregates["f1"]


def train_rft(
    params: PolicyParams,
    state: AdamState,
    train: list[Scene],
    val: list[Scene],
    config: RftConfig,
    seed: int,
    log: Callable[[dict], None] | None = None,
    r_thresh: float = 6.0,
):
    """``config.steps`` GRPO steps on scenes drawn per step from ``(seed, step)``."""
    config.validate()
    if val and config.eval_every:
        # step -1 records the starting point
        if log is not None:
            log({"step": -1, "val_f1": _val_f1(params, val, r_thresh)})
    for step in range(config.steps):
        rng = np.random.default_rng([seed, step])
        idx = rng.choice(len(train), size=min(config.scenes_per_step, len(train)), replace=False)
        params, rec = grpo_step(params, [train[i] for i in sorted(idx)], config, int(rng.integers(2**31)), state)
        rec = {"step": step, **rec}
        last = step + 1 == config.steps
        if val and config.eval_every and ((step + 1) % config.eval_every == 0 or last):
            rec["val_f1"] = _val_f1(params, val, r_thresh)
        if log is not None:
            log(rec)
    return params
