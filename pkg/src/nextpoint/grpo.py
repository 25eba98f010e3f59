"""Group-relative policy optimization over sampled point sequences.

One sampling round per step: rollouts come from the current snapshot, so the
fresh-policy ratio is 1 at the update, but the clipped surrogate is evaluated in
full and can be driven with arbitrary old log-probabilities.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn
from .optim import AdamState, clip_by_global_norm, update
from .policy import PolicyParams, Rollout, backward, forward, generate, patchify
from .reward import MatchResult, RewardBreakdown, RewardConfig, rollout_reward
from .scene import Scene

# added to the std when low-variance filtering is off, as plain GRPO does
PLAIN_STD_EPS = 1e-4


@dataclass(frozen=True)
class RftConfig:
    G: int = 8
    epsilon: float = 0.2
    delta: float = 0.01
    beta: float = 0.5
    gamma: float = 0.0
    temperature: float = 1.0
    lr: float = 5e-5
    steps: int = 200
    kl_coeff: float = 0.0
    scenes_per_step: int = 8
    lvgf: bool = True
    fgas: bool = True
    shape_brackets: bool = False
    importance_correction: bool = False
    r_thresh: float = 6.0
    weight_decay: float = 0.0
    grad_clip: float = 1.0
    eval_every: int = 50

    def validate(self) -> None:
        if self.G < 2:
            raise ValueError("G must be at least 2")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if not 0 < self.beta < 1:
            raise ValueError("beta must lie in (0, 1)")
        if self.delta < 0:
            raise ValueError("delta must be non-negative")
        if self.temperature <= 0:
            raise ValueError("rollout temperature must be positive")
        if self.gamma < 0 or self.kl_coeff < 0 or self.lr < 0 or self.weight_decay < 0:
            raise ValueError("gamma, kl_coeff, lr and weight_decay must be non-negative")
        if self.steps < 0 or self.scenes_per_step < 1 or self.eval_every < 0:
            raise ValueError("steps and eval_every must be >= 0 and scenes_per_step >= 1")
        self.reward_config().validate()

    def reward_config(self) -> RewardConfig:
        return RewardConfig(r_thresh=self.r_thresh, gamma=self.gamma, use_pq=self.gamma > 0)


@dataclass
class Group:
    scene: Scene
    rollouts: list[Rollout]
    rewards: np.ndarray
    breakdowns: list[RewardBreakdown] = field(default_factory=list)
    advantages: np.ndarray | None = None
    filtered: bool = False

    @property
    def reward_mean(self) -> float:
        return float(self.rewards.mean())

    @property
    def reward_std(self) -> float:
        return population_std(self.rewards)


def population_std(x) -> float:
    x = np.asarray(x, dtype=float)
    return float(np.sqrt(((x - x.mean()) ** 2).mean()))


def compute_advantages(rewards, std_eps: float = 0.0) -> np.ndarray:
    """Standardize rewards within a group by their population mean and std."""
    r = np.asarray(rewards, dtype=float)
    if r.size < 2:
        raise ValueError("a group needs at least two rollouts")
    std = population_std(r)
    if std == 0 and std_eps == 0:
        raise ValueError("zero reward spread: filter the group before standardizing")
    return (r - r.mean()) / (std + std_eps)


def lvgf_filter(groups: list[Group], delta: float) -> tuple[list[Group], int]:
    """Keep groups whose reward std reaches ``delta``; the rest are flagged filtered."""
    if delta < 0:
        raise ValueError("delta must be non-negative")
    kept = []
    for g in groups:
        g.filtered = g.reward_std < delta or g.reward_std == 0
        if not g.filtered:
            kept.append(g)
    return kept, len(groups) - len(kept)


def shape_rollout(advantage: float, rollout: Rollout, match: MatchResult | None, beta: float, brackets: bool = False) -> np.ndarray:
    """Per-token advantages for one rollout.

    Coordinate tokens of a point get ``beta * A`` when the point is FP under a
    positive advantage or TP under a negative one; every other token keeps ``A``.
    """
    out = np.full(len(rollout.tokens), float(advantage))
    if not rollout.format_ok or advantage == 0:
        return out
    if match is None:
        raise ValueError("format-valid rollout without a match result")
    for n, (start, end) in enumerate(rollout.parsed.token_spans):
        fires = (advantage > 0 and n in match.fp_pred) or (advantage < 0 and n in match.tp_pred)
        if not fires:
            continue
        if brackets:
            out[start:end] *= beta
        else:
            ix, iy = rollout.parsed.coord_indices(n)
            out[[ix, iy]] *= beta
    return out


def fgas_shape(group: Group, matches: list[MatchResult | None], beta: float, brackets: bool = False) -> list[np.ndarray]:
    if len(matches) != len(group.rollouts):
        raise ValueError("one match result per rollout is required")
    return [shape_rollout(a, r, m, beta, brackets) for a, r, m in zip(group.advantages, group.rollouts, matches)]


def unshaped(group: Group) -> list[np.ndarray]:
    return [np.full(len(r.tokens), float(a)) for a, r in zip(group.advantages, group.rollouts)]


def clipped_surrogate(ratio, advantage, epsilon: float):
    """Elementwise ``min(rho * A, clip(rho, 1 - eps, 1 + eps) * A)`` and its derivative in ``rho``."""
    rho = np.asarray(ratio, dtype=float)
    adv = np.asarray(advantage, dtype=float)
    plain = rho * adv
    clipped = np.clip(rho, 1 - epsilon, 1 + epsilon) * adv
    value = np.minimum(plain, clipped)
    # the derivative is A where the unclipped branch is the minimum, else 0
    return value, np.where(plain <= clipped, adv, 0.0)


def group_objective(
    params: PolicyParams,
    scene: Scene,
    rollouts: list[Rollout],
    token_adv: list[np.ndarray],
    old_logprobs: list[np.ndarray],
    epsilon: float,
    kl_coeff: float = 0.0,
):
    """Length-normalized clipped surrogate averaged over one group, and its parameter gradient.

    ``old_logprobs[i][n]`` is the behaviour log-probability of token ``n``; the forced
    prefix is excluded from both the sum and the length.
    """
    cfg = params.config
    n_forced = 1 + cfg.L
    G = len(rollouts)
    lengths = [len(r.tokens) for r in rollouts]
    T = max(lengths)
    ids = np.full((G, T), cfg.vocab.EOS, dtype=int)
    for i, r in enumerate(rollouts):
        ids[i, : lengths[i]] = r.tokens.ids
    patches = np.repeat(patchify(scene.intensity, cfg.patch)[None], G, axis=0)
    logits, _, cache = forward(params, patches, ids, keep_cache=True)
    logp_all = nn.log_softmax(logits[:, :-1])
    new_lp = np.take_along_axis(logp_all, ids[:, 1:, None], axis=-1)[..., 0]  # token n at column n-1
    coef = np.zeros((G, T - 1))
    total = 0.0
    for i in range(G):
        n = lengths[i]
        if n <= n_forced:
            continue
        cols = slice(n_forced - 1, n - 1)
        s = new_lp[i, cols] - np.asarray(old_logprobs[i][n_forced:n], dtype=float)
        rho = np.exp(s)
        val, dval = clipped_surrogate(rho, token_adv[i][n_forced:n], epsilon)
        obj = val
        dobj = dval * rho
        if kl_coeff > 0:
            # non-negative penalty exp(-s) + s - 1, zero when new == old
            obj = obj - kl_coeff * (np.exp(-s) + s - 1.0)
            dobj = dobj - kl_coeff * (1.0 - np.exp(-s))
        w = 1.0 / ((n - n_forced) * G)
        total += float(obj.sum()) * w
        coef[i, cols] = dobj * w
    # d logp(token) / d logits = onehot - softmax
    probs = np.exp(logp_all)
    dlp = -probs * coef[..., None]
    np.put_along_axis(dlp, ids[:, 1:, None], np.take_along_axis(dlp, ids[:, 1:, None], -1) + coef[..., None], -1)
    dlogits = np.zeros_like(logits)
    dlogits[:, :-1] = dlp
    return total, backward(params, cache, dlogits)


def collect_groups(params: PolicyParams, scenes: list[Scene], config: RftConfig, seed: int) -> list[Group]:
    rcfg = config.reward_config()
    groups = []
    for k, scene in enumerate(scenes):
        rollouts = generate(params, [scene] * config.G, config.temperature, seed=seed * 1_000_003 + k)
        breakdowns = [rollout_reward(r, scene, rcfg) for r in rollouts]
        rewards = np.array([b.r_total for b in breakdowns])
        groups.append(Group(scene, rollouts, rewards, breakdowns))
    return groups


def grpo_step(
    params: PolicyParams,
    scenes: list[Scene],
    config: RftConfig,
    seed: int,
    state: AdamState | None = None,
) -> tuple[PolicyParams, dict]:
    """Sample, score, filter, shape and take one gradient-ascent step.

    Returns the new snapshot and a report; raises FloatingPointError (with params
    untouched) if the objective or its gradient is non-finite.
    """
    config.validate()
    state = state if state is not None else AdamState()
    groups = collect_groups(params, scenes, config, seed)
    if config.lvgf:
        kept, n_filtered = lvgf_filter(groups, config.delta)
        for g in kept:
            g.advantages = compute_advantages(g.rewards)
    else:
        kept, n_filtered = groups, 0
        for g in kept:
            g.advantages = compute_advantages(g.rewards, PLAIN_STD_EPS)
    for g in groups:
        if g.filtered:
            g.advantages = np.zeros(len(g.rollouts))

    grads = {k: np.zeros_like(v) for k, v in params.tensors.items()}
    objective = 0.0
    for g in kept:
        if config.fgas:
            token_adv = fgas_shape(g, [b.match for b in g.breakdowns], config.beta, config.shape_brackets)
        else:
            token_adv = unshaped(g)
        if config.importance_correction:
            old = [np.asarray(r.sampling_logprobs) for r in g.rollouts]
        else:
            old = [np.asarray(r.tokens.logprobs) for r in g.rollouts]
        obj, gg = group_objective(params, g.scene, g.rollouts, token_adv, old, config.epsilon, config.kl_coeff)
        objective += obj / len(kept)
        for k in grads:
            grads[k] += gg[k] / len(kept)
    if not np.isfinite(objective):
        raise FloatingPointError("non-finite surrogate objective")

    rollouts = [r for g in groups for r in g.rollouts]
    report = {
        "mean_reward": float(np.mean([g.rewards.mean() for g in groups])),
        "mean_r_dm": float(np.mean([b.r_dm for g in groups for b in g.breakdowns])),
        "filtered_fraction": n_filtered / len(groups),
        "format_failure_rate": float(np.mean([not r.format_ok for r in rollouts])),
        "mean_abs_advantage": float(np.mean(np.abs(np.concatenate([g.advantages for g in groups])))),
        "objective": float(objective),
        "segmenter_calls": int(sum(b.segmenter_calls for g in groups for b in g.breakdowns)),
    }
    if not kept:
        # nothing to learn from: only the version moves
        return PolicyParams(params.config, params.tensors, params.version + 1), report
    # ascent on the objective = descent on its negation
    neg = {k: -v for k, v in grads.items()}
    report["grad_norm"] = clip_by_global_norm(neg, config.grad_clip)
    return update(params, neg, state, config.lr, config.weight_decay), report
