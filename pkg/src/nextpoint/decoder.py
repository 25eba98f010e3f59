"""Prompt-conditioned mask decoder that is pre-trained once and then frozen.

The latent prompts are mapped linearly onto a coarse grid of per-cell gain and
offset, bilinearly upsampled to pixels, and used to gate the scene intensity.
Pre-training pairs the decoder with an oracle that encodes ground-truth centroids
into latents, and targets the union mask of a random subset of prompted nuclei so
the decoder has to respect its prompts.
"""
from __future__ import annotations

import functools
import hashlib
import math
from dataclasses import dataclass

import numpy as np

from .optim import AdamState, adamw_tensors
from .scene import Point, SceneConfig, generate_scene, scene_seed
from .supervision import covt_loss

HEATMAP = 16


@dataclass(frozen=True)
class DecoderConfig:
    L: int = 4
    d: int = 32
    grid: int = 16
    width: int = 64
    height: int = 64


@dataclass(frozen=True)
class FrozenMaskDecoder:
    config: DecoderConfig
    tensors: dict
    checksum: str

    def __post_init__(self):
        for v in self.tensors.values():
            v.setflags(write=False)
        if tensor_checksum(self.tensors) != self.checksum:
            raise ValueError("decoder weights do not match their checksum")


def tensor_checksum(tensors: dict) -> str:
    h = hashlib.sha256()
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f8")
        h.update(name.encode())
        h.update(repr(arr.shape).encode())
        h.update(arr.tobytes())
    return h.hexdigest()


def freeze(config: DecoderConfig, tensors: dict) -> FrozenMaskDecoder:
    copied = {k: np.array(v, dtype=np.float64) for k, v in tensors.items()}
    return FrozenMaskDecoder(config, copied, tensor_checksum(copied))


@functools.lru_cache(maxsize=None)
def upsample_matrix(n_out: int, n_in: int) -> np.ndarray:
    """Bilinear interpolation weights ``(n_out, n_in)`` between cell centers, edges clamped."""
    pos = np.clip((np.arange(n_out) + 0.5) * n_in / n_out - 0.5, 0, n_in - 1)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = pos - lo
    m = np.zeros((n_out, n_in))
    m[np.arange(n_out), lo] += 1 - frac
    m[np.arange(n_out), hi] += frac
    m.setflags(write=False)
    return m


def init_decoder(config: DecoderConfig, seed: int = 0) -> dict:
    rng = np.random.default_rng(seed)
    n_in = config.L * config.d
    return {
        "proj_w": rng.normal(0, 0.1 / math.sqrt(n_in), (n_in, 2 * config.grid * config.grid)),
        "proj_b": np.zeros(2 * config.grid * config.grid),
        "gain0": np.array([4.0]),
        "bias0": np.array([-2.0]),
    }


def _forward(tensors: dict, config: DecoderConfig, latents: np.ndarray, intensity: np.ndarray):
    """Mask logits for one scene; returns ``(logits (H, W), cache)``."""
    c = config.grid
    uy = upsample_matrix(config.height, c)
    ux = upsample_matrix(config.width, c)
    z = (latents.reshape(-1) @ tensors["proj_w"] + tensors["proj_b"]).reshape(2, c, c)
    gain = uy @ z[0] @ ux.T
    offset = uy @ z[1] @ ux.T
    logits = (tensors["gain0"][0] + gain) * intensity + tensors["bias0"][0] + offset
    return logits, (latents, intensity, gain)


def _backward(tensors: dict, config: DecoderConfig, cache, dlogits: np.ndarray, want_weights: bool):
    latents, intensity, gain = cache
    uy = upsample_matrix(config.height, config.grid)
    ux = upsample_matrix(config.width, config.grid)
    dgain = dlogits * intensity
    dz = np.stack([uy.T @ dgain @ ux, uy.T @ dlogits @ ux]).reshape(-1)
    dlat = (tensors["proj_w"] @ dz).reshape(latents.shape)
    if not want_weights:
        return dlat, None
    g = {
        "proj_w": np.outer(latents.reshape(-1), dz),
        "proj_b": dz,
        "gain0": np.array([dgain.sum()]),
        "bias0": np.array([dlogits.sum()]),
    }
    return dlat, g


def decode_mask(frozen: FrozenMaskDecoder, latents: np.ndarray, intensity: np.ndarray) -> np.ndarray:
    """Mask logits ``(H, W)`` for one scene given ``L`` latent prompt vectors."""
    if latents.shape[0] != frozen.config.L:
        raise ValueError(f"expected {frozen.config.L} latents, got {latents.shape[0]}")
    return _forward(frozen.tensors, frozen.config, latents, intensity)[0]


def decode_mask_grad(frozen: FrozenMaskDecoder, latents: np.ndarray, intensity: np.ndarray, dlogits: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. the latents only; the frozen weights have no update path."""
    if latents.shape[0] != frozen.config.L:
        raise ValueError(f"expected {frozen.config.L} latents, got {latents.shape[0]}")
    _, cache = _forward(frozen.tensors, frozen.config, latents, intensity)
    return _backward(frozen.tensors, frozen.config, cache, dlogits, want_weights=False)[0]


def covt_loss_and_grad(frozen: FrozenMaskDecoder, latents: np.ndarray, intensity: np.ndarray, gt_mask: np.ndarray):
    logits, cache = _forward(frozen.tensors, frozen.config, latents, intensity)
    loss, dlogits = covt_loss(logits, gt_mask)
    return loss, _backward(frozen.tensors, frozen.config, cache, dlogits, want_weights=False)[0]


# ---------------------------------------------------------------- oracle prompts and pre-training

def centroid_heatmap(points: list[Point], width: int, height: int) -> np.ndarray:
    """Gaussian splats of the centroids on a coarse grid, flattened."""
    cx = (np.arange(HEATMAP) + 0.5) * width / HEATMAP
    cy = (np.arange(HEATMAP) + 0.5) * height / HEATMAP
    sig = width / HEATMAP
    out = np.zeros((HEATMAP, HEATMAP))
    for p in points:
        out += np.exp(-((cy[:, None] - p.y) ** 2 + (cx[None, :] - p.x) ** 2) / (2 * sig * sig))
    return out.reshape(-1)


def init_oracle(config: DecoderConfig, seed: int = 0) -> dict:
    rng = np.random.default_rng(seed + 1)
    n = HEATMAP * HEATMAP
    return {"w": rng.normal(0, 1.0 / math.sqrt(n), (n, config.L * config.d)), "b": np.zeros(config.L * config.d)}


def oracle_latents(oracle: dict, config: DecoderConfig, points: list[Point]) -> np.ndarray:
    h = centroid_heatmap(points, config.width, config.height)
    return (h @ oracle["w"] + oracle["b"]).reshape(config.L, config.d)


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    union = np.logical_or(a, b).sum()
    return 1.0 if union == 0 else float(np.logical_and(a, b).sum() / union)


def _union(instances, shape) -> np.ndarray:
    out = np.zeros(shape, dtype=bool)
    for inst in instances:
        out |= inst.mask
    return out


def pretrain_decoder(
    config: DecoderConfig,
    scene_config: SceneConfig,
    steps: int = 1500,
    batch: int = 8,
    lr: float = 3e-3,
    seed: int = 0,
    n_heldout: int = 50,
):
    """Train decoder and oracle jointly, then freeze the decoder.

    Returns ``(frozen, oracle, report)``; the report holds held-out IoU with oracle
    latents prompting every nucleus and with only every other nucleus prompted.
    """
    if config.L < 1:
        raise ValueError("the mask decoder needs at least one latent prompt")
    tensors = {**{"dec." + k: v for k, v in init_decoder(config, seed).items()},
               **{"orc." + k: v for k, v in init_oracle(config, seed).items()}}
    state = AdamState()
    rng = np.random.default_rng(seed)
    losses = []
    for step in range(steps):
        dec = {k[4:]: v for k, v in tensors.items() if k.startswith("dec.")}
        orc = {k[4:]: v for k, v in tensors.items() if k.startswith("orc.")}
        grads = {k: np.zeros_like(v) for k, v in tensors.items()}
        total = 0.0
        for b in range(batch):
            scene = generate_scene(scene_config, scene_seed(seed + 7919, step * batch + b))
            keep = np.ones(len(scene.instances), dtype=bool)
            if rng.random() < 0.5:
                keep = rng.random(len(scene.instances)) < 0.5
            pts = [inst.centroid for inst, k in zip(scene.instances, keep) if k]
            target = _union([inst for inst, k in zip(scene.instances, keep) if k], scene.intensity.shape)
            heat = centroid_heatmap(pts, config.width, config.height)
            lat = (heat @ orc["w"] + orc["b"]).reshape(config.L, config.d)
            logits, cache = _forward(dec, config, lat, scene.intensity)
            loss, dlogits = covt_loss(logits, target)
            dlat, gdec = _backward(dec, config, cache, dlogits, want_weights=True)
            total += loss / batch
            for k_, g_ in gdec.items():
                grads["dec." + k_] += g_ / batch
            dl = dlat.reshape(-1) / batch
            grads["orc.w"] += np.outer(heat, dl)
            grads["orc.b"] += dl
        losses.append(total)
        cur_lr = lr * 0.5 * (1 + math.cos(math.pi * step / steps))
        tensors = adamw_tensors(tensors, grads, state, cur_lr, decays=lambda n: False)
    dec = {k[4:]: v for k, v in tensors.items() if k.startswith("dec.")}
    orc = {k[4:]: v for k, v in tensors.items() if k.startswith("orc.")}
    frozen = freeze(config, dec)
    ious, sub_ious = [], []
    for i in range(n_heldout):
        scene = generate_scene(scene_config, scene_seed(seed + 104729, i))
        lat = oracle_latents(orc, config, scene.centroids)
        ious.append(mask_iou(decode_mask(frozen, lat, scene.intensity) > 0, _union(scene.instances, scene.intensity.shape)))
        # every other nucleus prompted: the rest must stay background
        half = scene.instances[::2]
        lat = oracle_latents(orc, config, [inst.centroid for inst in half])
        sub_ious.append(mask_iou(decode_mask(frozen, lat, scene.intensity) > 0, _union(half, scene.intensity.shape)))
    report = {
        "final_loss": float(np.mean(losses[-50:])) if losses else float("nan"),
        "heldout_iou": float(np.mean(ious)),
        "heldout_subset_iou": float(np.mean(sub_ious)),
        "steps": steps,
        "checksum": frozen.checksum,
    }
    return frozen, orc, report

