"""A small prefix-conditioned transformer that emits point-list token sequences.

The sequence core runs over ``[scene patches | tokens]``.  Scene patches attend to
each other freely; token positions attend to every patch and to earlier tokens.
Backpropagation is written out by hand (see :mod:`nextpoint.nn`).
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from functools import lru_cache

import numpy as np

from . import nn
from .scene import Scene
from .tokenizer import FormatError, ParsedDetections, TokenSequence, Vocabulary, parse_sequence


@dataclass(frozen=True)
class ModelConfig:
    K: int = 64
    L: int = 4
    d: int = 32
    n_layers: int = 2
    n_heads: int = 4
    ff_mult: int = 4
    patch: int = 8
    width: int = 64
    height: int = 64
    max_len: int = 64
    # sinusoidal init of patch positions and coordinate-token embeddings
    fourier_init: bool = True

    def validate(self) -> None:
        if self.width % self.patch or self.height % self.patch:
            raise ValueError(f"scene {self.width}x{self.height} not divisible by patch {self.patch}")
        if self.d % self.n_heads:
            raise ValueError("width must be divisible by the head count")
        if self.n_layers < 1:
            raise ValueError("need at least one block")
        if self.max_len < 2 + self.L:
            raise ValueError("max_len cannot hold BOS, latents and EOS")
        Vocabulary(self.K, self.L)

    @property
    def vocab(self) -> Vocabulary:
        return Vocabulary(self.K, self.L)

    @property
    def grid(self) -> tuple[int, int]:
        return self.height // self.patch, self.width // self.patch

    @property
    def n_patches(self) -> int:
        r, c = self.grid
        return r * c


@dataclass
class PolicyParams:
    config: ModelConfig
    tensors: dict[str, np.ndarray]
    version: int = 0

    def copy(self) -> "PolicyParams":
        return PolicyParams(self.config, {k: v.copy() for k, v in self.tensors.items()}, self.version)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]


@dataclass
class Rollout:
    tokens: TokenSequence  # logprobs under the untempered policy
    parsed: ParsedDetections | None
    error: FormatError | None
    latents: np.ndarray  # (L, d)
    sampling_logprobs: list[float] = field(default_factory=list)

    @property
    def format_ok(self) -> bool:
        return self.parsed is not None


def _fourier(u: np.ndarray, n_freq: int) -> np.ndarray:
    f = np.arange(1, n_freq + 1)
    ang = math.pi * f[None, :] * u[:, None]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


def init_params(config: ModelConfig, seed: int = 0) -> PolicyParams:
    config.validate()
    rng = np.random.default_rng(seed)
    d, V = config.d, config.vocab.size
    pd = config.patch * config.patch
    nr, nc = config.grid
    f = config.ff_mult * d

    def lin(n_in, n_out):
        bound = 1.0 / math.sqrt(n_in)
        return rng.uniform(-bound, bound, (n_in, n_out))

    t = {
        "patch_w": lin(pd, d),
        "patch_b": rng.uniform(-1, 1, d) / math.sqrt(pd),
        "pos_row": rng.normal(0, 0.1, (nr, d)),
        "pos_col": rng.normal(0, 0.1, (nc, d)),
        "tok_emb": rng.normal(0, 1.0, (V, d)),
        "tok_pos": rng.normal(0, 0.1, (config.max_len, d)),
    }
    for layer in range(config.n_layers):
        p = f"l{layer}."
        t[p + "ln1_g"] = np.ones(d)
        t[p + "ln1_b"] = np.zeros(d)
        for name in ("wq", "wk", "wv", "wo"):
            t[p + name] = lin(d, d)
        t[p + "ln2_g"] = np.ones(d)
        t[p + "ln2_b"] = np.zeros(d)
        t[p + "w1"] = lin(d, f)
        t[p + "b1"] = rng.uniform(-1, 1, f) / math.sqrt(d)
        t[p + "w2"] = lin(f, d)
        t[p + "b2"] = rng.uniform(-1, 1, d) / math.sqrt(f)
    t["lnf_g"] = np.ones(d)
    t["lnf_b"] = np.zeros(d)
    t["head_w"] = lin(d, V)
    t["head_b"] = rng.uniform(-1, 1, V) / math.sqrt(d)

    if config.fourier_init:
        # columns fill the first half of the width and rows the second, so that
        # coordinate tokens (carrying both halves) can be compared to patch positions
        half = d // 2
        nf = half // 2
        t["pos_col"][:] = 0.0
        t["pos_row"][:] = 0.0
        t["pos_col"][:, : 2 * nf] = _fourier((np.arange(nc) + 0.5) / nc, nf)
        t["pos_row"][:, half : half + 2 * nf] = _fourier((np.arange(nr) + 0.5) / nr, nf)
        bins = _fourier((np.arange(config.K) + 0.5) / config.K, nf)
        t["tok_emb"][: config.K, : 2 * nf] = bins
        t["tok_emb"][: config.K, half : half + 2 * nf] = bins
    return PolicyParams(config, t, 0)


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    return {k: v.shape for k, v in init_params(config, 0).tensors.items()}


# ---------------------------------------------------------------- scene encoding

def patchify(intensity: np.ndarray, patch: int) -> np.ndarray:
    H, W = intensity.shape
    if H % patch or W % patch:
        raise ValueError(f"scene {W}x{H} not divisible by patch {patch}")
    nr, nc = H // patch, W // patch
    return intensity.reshape(nr, patch, nc, patch).transpose(0, 2, 1, 3).reshape(nr * nc, patch * patch)


def _patch_positions(params: PolicyParams) -> np.ndarray:
    nr, nc = params.config.grid
    return (params["pos_row"][:, None, :] + params["pos_col"][None, :, :]).reshape(nr * nc, -1)


def encode_scene(params: PolicyParams, scene: Scene) -> np.ndarray:
    """Per-patch features: linear projection of the pixels plus a 2-D positional embedding."""
    cfg = params.config
    if (scene.width, scene.height) != (cfg.width, cfg.height):
        raise ValueError(f"scene is {scene.width}x{scene.height}, model expects {cfg.width}x{cfg.height}")
    patches = patchify(scene.intensity, cfg.patch)
    return patches @ params["patch_w"] + params["patch_b"] + _patch_positions(params)


@lru_cache(maxsize=64)
def _mask_bias(P: int, T: int) -> np.ndarray:
    S = P + T
    allowed = np.tril(np.ones((S, S), dtype=bool))
    allowed[:P, :P] = True
    bias = np.where(allowed, 0.0, nn.NEG_INF)
    bias.setflags(write=False)
    return bias


# ---------------------------------------------------------------- core forward/backward

def forward(params: PolicyParams, patches: np.ndarray, ids: np.ndarray, keep_cache: bool = True):
    """Batched teacher-forced pass.

    ``patches`` is ``(B, P, patch*patch)`` and ``ids`` ``(B, T)``.  Returns logits
    ``(B, T, V)`` where row ``j`` scores token ``j + 1``, the final-normalized token
    states ``(B, T, d)`` and a cache for :func:`backward`.
    """
    t = params.tensors
    cfg = params.config
    B, T = ids.shape
    if T > cfg.max_len:
        raise ValueError(f"sequence of {T} tokens exceeds max_len={cfg.max_len}")
    P = patches.shape[1]
    xs = patches @ t["patch_w"] + t["patch_b"] + _patch_positions(params)
    xt = t["tok_emb"][ids] + t["tok_pos"][:T]
    x = np.concatenate([xs, xt], axis=1)
    bias = _mask_bias(P, T)
    layers = []
    for layer in range(cfg.n_layers):
        p = f"l{layer}."
        h1, c_ln1 = nn.layernorm_fwd(x, t[p + "ln1_g"], t[p + "ln1_b"])
        att, c_att = nn.attention_fwd(h1, t[p + "wq"], t[p + "wk"], t[p + "wv"], t[p + "wo"], cfg.n_heads, bias)
        x = x + att
        h2, c_ln2 = nn.layernorm_fwd(x, t[p + "ln2_g"], t[p + "ln2_b"])
        u = h2 @ t[p + "w1"] + t[p + "b1"]
        g, c_gelu = nn.gelu_fwd(u)
        x = x + g @ t[p + "w2"] + t[p + "b2"]
        if keep_cache:
            layers.append((c_ln1, c_att, c_ln2, h2, c_gelu, g))
    hf, c_lnf = nn.layernorm_fwd(x[:, P:], t["lnf_g"], t["lnf_b"])
    logits = hf @ t["head_w"] + t["head_b"]
    cache = (patches, ids, P, layers, c_lnf, hf) if keep_cache else None
    return logits, hf, cache


def backward(params: PolicyParams, cache, dlogits: np.ndarray, dhidden: np.ndarray | None = None) -> dict[str, np.ndarray]:
    """Gradients of a scalar w.r.t. every parameter, given its gradient w.r.t. the outputs of :func:`forward`."""
    t = params.tensors
    cfg = params.config
    patches, ids, P, layers, c_lnf, hf = cache
    B, T = ids.shape
    g: dict[str, np.ndarray] = {}
    dhf, g["head_w"], g["head_b"] = nn.linear_bwd(dlogits, hf, t["head_w"])
    if dhidden is not None:
        dhf = dhf + dhidden
    dxt, g["lnf_g"], g["lnf_b"] = nn.layernorm_bwd(dhf, c_lnf)
    dx = np.zeros((B, P + T, cfg.d))
    dx[:, P:] = dxt
    for layer in reversed(range(cfg.n_layers)):
        p = f"l{layer}."
        c_ln1, c_att, c_ln2, h2, c_gelu, gl = layers[layer]
        dgl, g[p + "w2"], g[p + "b2"] = nn.linear_bwd(dx, gl, t[p + "w2"])
        du = nn.gelu_bwd(dgl, c_gelu)
        dh2, g[p + "w1"], g[p + "b1"] = nn.linear_bwd(du, h2, t[p + "w1"])
        d_ln2, g[p + "ln2_g"], g[p + "ln2_b"] = nn.layernorm_bwd(dh2, c_ln2)
        dx = dx + d_ln2
        dh1, g[p + "wq"], g[p + "wk"], g[p + "wv"], g[p + "wo"] = nn.attention_bwd(
            dx, c_att, t[p + "wq"], t[p + "wk"], t[p + "wv"], t[p + "wo"]
        )
        d_ln1, g[p + "ln1_g"], g[p + "ln1_b"] = nn.layernorm_bwd(dh1, c_ln1)
        dx = dx + d_ln1
    dxs, dxt = dx[:, :P], dx[:, P:]
    g["patch_w"] = patches.reshape(-1, patches.shape[-1]).T @ dxs.reshape(-1, cfg.d)
    g["patch_b"] = dxs.sum(axis=(0, 1))
    dpos = dxs.sum(0).reshape(*cfg.grid, cfg.d)
    g["pos_row"] = dpos.sum(1)
    g["pos_col"] = dpos.sum(0)
    tok_emb = np.zeros_like(t["tok_emb"])
    np.add.at(tok_emb, ids.ravel(), dxt.reshape(-1, cfg.d))
    g["tok_emb"] = tok_emb
    tok_pos = np.zeros_like(t["tok_pos"])
    tok_pos[:T] = dxt.sum(0)
    g["tok_pos"] = tok_pos
    return g


def forward_teacher_forced(params: PolicyParams, scene: Scene, target: TokenSequence | list[int]):
    """Logits for every next-token prediction plus the L latent output vectors.

    Row ``j`` of the returned logits scores token ``j + 1`` of ``target``.
    """
    ids = np.asarray(target.ids if isinstance(target, TokenSequence) else target, dtype=int)[None, :]
    patches = patchify(scene.intensity, params.config.patch)[None]
    logits, hf, _ = forward(params, patches, ids, keep_cache=False)
    L = params.config.L
    return logits[0, :-1], hf[0, 1 : 1 + L]


# ---------------------------------------------------------------- scoring and sampling

def _token_logprobs(logits: np.ndarray, ids: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    """Per-token log-probabilities of ``ids[:, 1:]`` under row-shifted logits."""
    lp = nn.log_softmax(logits[:, :-1] / temperature)
    return np.take_along_axis(lp, ids[:, 1:, None], axis=-1)[..., 0]


def logprob_of_batch(params: PolicyParams, patches: np.ndarray, ids: np.ndarray, n_forced: int, temperature: float = 1.0):
    logits, hf, _ = forward(params, patches, ids, keep_cache=False)
    lp = np.zeros(ids.shape)
    lp[:, 1:] = _token_logprobs(logits, ids, temperature)
    # the BOS/latent prefix is forced, probability one
    lp[:, :n_forced] = 0.0
    return lp, hf


def logprob_of(params: PolicyParams, scene: Scene, tokens: TokenSequence | list[int]) -> list[float]:
    """Per-token log-probabilities (forced prefix scored as 0) under the untempered policy."""
    ids = np.asarray(tokens.ids if isinstance(tokens, TokenSequence) else tokens, dtype=int)[None, :]
    if ids.shape[1] > params.config.max_len:
        raise ValueError(f"sequence of {ids.shape[1]} tokens exceeds max_len={params.config.max_len}")
    patches = patchify(scene.intensity, params.config.patch)[None]
    lp, _ = logprob_of_batch(params, patches, ids, 1 + params.config.L)
    return lp[0].tolist()


def _step(params: PolicyParams, kv: list, new_ids: np.ndarray, pos: int) -> np.ndarray:
    """Advance every sequence by one token, appending to the per-layer key/value caches."""
    t = params.tensors
    cfg = params.config
    B = new_ids.shape[0]
    nh = cfg.n_heads
    dh = cfg.d // nh
    x = t["tok_emb"][new_ids][:, None, :] + t["tok_pos"][pos]
    for layer in range(cfg.n_layers):
        p = f"l{layer}."
        h1, _ = nn.layernorm_fwd(x, t[p + "ln1_g"], t[p + "ln1_b"])
        q, k, v = (
            (h1 @ t[p + w]).reshape(B, 1, nh, dh).transpose(0, 2, 1, 3) for w in ("wq", "wk", "wv")
        )
        K = np.concatenate([kv[layer][0], k], axis=2)
        Vv = np.concatenate([kv[layer][1], v], axis=2)
        kv[layer] = (K, Vv)
        a = nn.softmax(q @ K.transpose(0, 1, 3, 2) / math.sqrt(dh))
        o = (a @ Vv).transpose(0, 2, 1, 3).reshape(B, 1, cfg.d)
        x = x + o @ t[p + "wo"]
        h2, _ = nn.layernorm_fwd(x, t[p + "ln2_g"], t[p + "ln2_b"])
        g, _ = nn.gelu_fwd(h2 @ t[p + "w1"] + t[p + "b1"])
        x = x + g @ t[p + "w2"] + t[p + "b2"]
    hf, _ = nn.layernorm_fwd(x[:, 0], t["lnf_g"], t["lnf_b"])
    return hf @ t["head_w"] + t["head_b"]


def _decode(params: PolicyParams, patches: np.ndarray, temperature: float, rng: np.random.Generator | None):
    """Autoregressive generation for a batch; greedy when ``temperature == 0``."""
    cfg = params.config
    vocab = cfg.vocab
    B = patches.shape[0]
    ids = np.tile(np.asarray(vocab.prefix()), (B, 1))
    logits, _, cache = forward(params, patches, ids, keep_cache=True)
    kv = [(c_att[2], c_att[3]) for (_, c_att, *_rest) in cache[3]]
    z = logits[:, -1]
    done = np.zeros(B, dtype=bool)
    lengths = np.full(B, cfg.max_len)
    while ids.shape[1] < cfg.max_len and not done.all():
        if temperature == 0:
            nxt = z.argmax(-1)
        else:
            probs = nn.softmax(z / temperature)
            u = rng.random(B)
            nxt = np.minimum((probs.cumsum(-1) < u[:, None]).sum(-1), z.shape[-1] - 1)
        nxt = np.where(done, vocab.EOS, nxt)
        ids = np.concatenate([ids, nxt[:, None]], axis=1)
        newly = (~done) & (nxt == vocab.EOS)
        lengths[newly] = ids.shape[1]
        done |= newly
        if ids.shape[1] < cfg.max_len and not done.all():
            z = _step(params, kv, nxt, ids.shape[1] - 1)
    return ids, lengths


def generate(params: PolicyParams, scenes: list[Scene], temperature: float = 0.0, seed: int = 0) -> list[Rollout]:
    """Sample (or greedily decode) one sequence per scene and score it.

    Recorded log-probabilities come from rescoring the finished sequences with the
    teacher-forced pass, so they equal :func:`logprob_of` on the same tokens.
    """
    if temperature < 0:
        raise ValueError("temperature must be non-negative")
    cfg = params.config
    if not scenes:
        return []
    patches = np.stack([patchify(s.intensity, cfg.patch) for s in scenes])
    rng = np.random.default_rng(seed) if temperature > 0 else None
    ids, lengths = _decode(params, patches, temperature, rng)
    n_forced = 1 + cfg.L
    lp, hf = logprob_of_batch(params, patches, ids, n_forced)
    if temperature > 0:
        slp, _ = logprob_of_batch(params, patches, ids, n_forced, temperature)
    else:
        slp = lp
    rollouts = []
    for b in range(len(scenes)):
        n = int(lengths[b])
        seq = ids[b, :n].tolist()
        try:
            parsed, err = parse_sequence(seq, cfg.width, cfg.height, cfg.K, cfg.L), None
        except FormatError as exc:
            parsed, err = None, exc
        rollouts.append(
            Rollout(
                TokenSequence(seq, lp[b, :n].tolist()),
                parsed,
                err,
                hf[b, 1 : 1 + cfg.L].copy(),
                slp[b, :n].tolist(),
            )
        )
    return rollouts


def sample_rollout(params: PolicyParams, scene: Scene, temperature: float, seed: int) -> Rollout:
    """One sampled rollout; ``temperature == 0`` selects argmax decoding."""
    return generate(params, [scene], temperature, seed)[0]


def greedy_decode(params: PolicyParams, scenes: list[Scene]) -> list[Rollout]:
    return generate(params, scenes, 0.0)


def config_dict(config: ModelConfig) -> dict:
    return asdict(config)
