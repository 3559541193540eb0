"""Tiered group construction and the difficulty-conditioned clipped policy update."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from dare_lab import rng as rngmod
from dare_lab.buffer import BufferEntry, ReplayBuffer
from dare_lab.errors import DataError, NumericalError
from dare_lab.estimators import DifficultyEstimate
from dare_lab.parallel import parallel_map
from dare_lab.world import PromptSpec, Rollout, ToyPolicy, log_softmax, rollout

TIERS = ("easy", "medium", "hard")
SIGMA_FLOOR = 1e-6


@dataclass
class TierConfig:
    d_easy: float = 0.3
    d_hard: float = 0.8
    g: int = 8
    g_easy: int = 4
    g_hard: int = 16
    lambda_easy: float = 1e-4
    lambda_hard: float = 1e-4
    eps: float = 0.2
    eps_plus_easy: float = 0.6
    t_budget_easy: int | None = None
    beta_kl: float = 0.0
    sigma: float = 0.5
    lr: float = 0.05
    adaptive: bool = True
    hints: bool = True

    def validate(self, t_max: int | None = None) -> None:
        if not 0 < self.d_easy < self.d_hard < 1:
            raise ValueError("need 0 < d_easy < d_hard < 1")
        if not 2 <= self.g_easy <= self.g <= self.g_hard:
            raise ValueError("need 2 <= g_easy <= g <= g_hard")
        if self.lambda_easy < 0 or not 0 <= self.lambda_hard < 1:
            raise ValueError("need lambda_easy >= 0 and 0 <= lambda_hard < 1")
        if self.eps_plus_easy < self.eps:
            raise ValueError("eps_plus_easy must be >= eps")
        if not 0 <= self.sigma <= 1:
            raise ValueError("sigma must lie in [0, 1]")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.beta_kl < 0:
            raise ValueError("beta_kl must be non-negative")
        if t_max is not None and self.t_budget_easy is not None and not 1 <= self.t_budget_easy <= t_max:
            raise ValueError("t_budget_easy must lie in [1, t_max]")


@dataclass(frozen=True)
class TierBudget:
    g_q: int
    length_budget: int
    eps_minus: float
    eps_plus: float


@dataclass
class TrainGroup:
    prompt_id: int
    tier: str
    d_hat: float
    rollouts: list[Rollout]
    shaped_rewards: np.ndarray
    advantages: np.ndarray
    eps_minus: float
    eps_plus: float
    source: str = "snis"
    n_replay: int = 0
    n_hinted: int = 0
    fresh: list[Rollout] = field(default_factory=list)


@dataclass
class StepStats:
    objective: float
    surrogate: float
    kl: float
    mean_ratio: float
    clip_frac: float
    grad_norm: float
    n_tokens: int
    kl_by_tier: dict[str, float] = field(default_factory=dict)
    clip_by_group: dict[int, float] = field(default_factory=dict)
    kl_by_group: dict[int, float] = field(default_factory=dict)


# ---------------------------------------------------------------------------
# tiers and shaping


def assign_tier(d_hat: float, config: TierConfig) -> str:
    if d_hat < config.d_easy:
        return "easy"
    if d_hat > config.d_hard:
        return "hard"
    return "medium"


def tier_budget(tier: str, config: TierConfig, t_max: int) -> TierBudget:
    if tier == "easy":
        budget = t_max if config.t_budget_easy is None else config.t_budget_easy
        return TierBudget(config.g_easy, budget, config.eps, config.eps_plus_easy)
    if tier == "medium":
        return TierBudget(config.g, t_max, config.eps, config.eps)
    if tier == "hard":
        return TierBudget(config.g_hard, t_max, config.eps, config.eps)
    raise ValueError(f"unknown tier {tier!r}")


def _clamp01(x: float) -> float:
    return min(max(x, 0.0), 1.0)


def shape_reward(tier: str, d_hat: float, r: int, length: int, t_max_group: int, config: TierConfig) -> float:
    """Length penalty on correct easy responses, length bonus on incorrect hard ones."""
    frac = length / t_max_group
    if tier == "easy" and r == 1:
        w = _clamp01((config.d_easy - d_hat) / config.d_easy)
        return r - config.lambda_easy * w * frac
    if tier == "hard" and r == 0:
        w = _clamp01((d_hat - config.d_hard) / (1.0 - config.d_hard))
        return r + config.lambda_hard * w * frac
    return float(r)


def group_advantages(shaped_rewards: Sequence[float]) -> np.ndarray:
    r = np.asarray(shaped_rewards, dtype=float)
    if r.size < 2:
        raise DataError("group needs at least two rollouts")
    if np.all(r == r[0]):
        return np.zeros_like(r)
    return (r - r.mean()) / max(float(r.std()), SIGMA_FLOOR)


# ---------------------------------------------------------------------------
# group construction


@dataclass(frozen=True)
class BatchItem:
    prompt: PromptSpec
    estimate: DifficultyEstimate


def _make_group(
    item: BatchItem,
    buffer: ReplayBuffer,
    policy: ToyPolicy,
    config: TierConfig,
    seed: int,
    step: int,
) -> TrainGroup:
    prompt = item.prompt
    d_hat = item.estimate.value
    tier = assign_tier(d_hat, config) if config.adaptive else "medium"
    budget = tier_budget(tier, config, policy.t_max)
    g_q = budget.g_q
    standard = min(config.g, g_q) if tier == "hard" else g_q
    n_fresh = min(standard, math.ceil(config.sigma * standard))
    n_replay_want = standard - n_fresh
    replay = [e.rollout for e in buffer.entries(prompt.id)[::-1][:n_replay_want]]
    n_fresh = standard - len(replay)

    def stream(i: int):
        return rngmod.stream(seed, rngmod.ROLLOUT, step, prompt.id, i)

    fresh = [rollout(policy, prompt, stream(i), max_len=budget.length_budget, step=step) for i in range(n_fresh)]
    hint = buffer.select_hint(prompt.id) if (tier == "hard" and config.hints) else None
    extra = []
    for j in range(g_q - standard):
        extra.append(rollout(policy, prompt, stream(n_fresh + j), hint=hint, max_len=budget.length_budget, step=step))
    fresh_all = fresh + extra
    rollouts = replay + fresh_all
    t_group = max(r.length for r in rollouts)
    shaped = np.array([shape_reward(tier, d_hat, r.reward, r.length, t_group, config) for r in rollouts])
    return TrainGroup(
        prompt_id=prompt.id,
        tier=tier,
        d_hat=d_hat,
        rollouts=rollouts,
        shaped_rewards=shaped,
        advantages=group_advantages(shaped),
        eps_minus=budget.eps_minus,
        eps_plus=budget.eps_plus,
        source=item.estimate.source,
        n_replay=len(replay),
        n_hinted=sum(r.hinted for r in extra),
        fresh=fresh_all,
    )


def build_groups(
    batch: Sequence[BatchItem],
    buffer: ReplayBuffer,
    policy: ToyPolicy,
    config: TierConfig,
    seed: int,
    step: int,
    *,
    push: bool = True,
) -> list[TrainGroup]:
    """Tiered rollout groups for a batch, ordered by prompt id.

    Fresh rollouts draw from per-(step, prompt, index) streams so generation
    may run in parallel. With ``push`` the fresh rollouts are appended to the
    buffer after every group is built.
    """
    items = sorted(batch, key=lambda it: it.prompt.id)
    groups = parallel_map(lambda it: _make_group(it, buffer, policy, config, seed, step), items)
    if push:
        for g in groups:
            for r in g.fresh:
                buffer.push(BufferEntry(g.prompt_id, r))
    return groups


# ---------------------------------------------------------------------------
# objective and gradient


@dataclass
class Gradient:
    shared: np.ndarray
    skill: np.ndarray
    prompt: np.ndarray | None

    def norm(self) -> float:
        sq = float(np.sum(self.shared**2) + np.sum(self.skill**2))
        if self.prompt is not None:
            sq += float(np.sum(self.prompt**2))
        return math.sqrt(sq)


def token_is_clipped(ratio: float, advantage: float, eps_minus: float, eps_plus: float) -> bool:
    """True when the min() selects the clipped branch and blocks the gradient."""
    clipped = min(max(ratio, 1.0 - eps_minus), 1.0 + eps_plus) * advantage
    return ratio * advantage > clipped


def _needed_rows(policy: ToyPolicy, prompt: PromptSpec, tokens: Sequence[int]) -> np.ndarray:
    target, eos, filler = prompt.target, policy.eos_token, policy.filler_token
    out = np.full(len(tokens), -1, dtype=int)
    matched, dead = 0, False
    for t, tok in enumerate(tokens):
        if not dead:
            out[t] = target[matched] if matched < len(target) else (-1 if eos is None else eos)
        if dead or tok == filler or tok == eos:
            continue
        if matched < len(target) and tok == target[matched]:
            matched += 1
        else:
            dead = True
    return out


def _logits_rows(policy: ToyPolicy, prompt_id: int, needed: np.ndarray) -> np.ndarray:
    n = len(needed)
    z = np.array(policy.shared_logits[:n], dtype=float)
    if policy.prompt_logits is not None:
        z = z + policy.prompt_logits[prompt_id, :n]
    rows = np.nonzero(needed >= 0)[0]
    z[rows, needed[rows]] += policy.skill_logits[rows, needed[rows]]
    return z


def objective_and_grad(
    policy: ToyPolicy,
    groups: Sequence[TrainGroup],
    config: TierConfig,
    ref_policy: ToyPolicy | None = None,
    prompts: dict[int, PromptSpec] | None = None,
    *,
    with_grad: bool = True,
) -> tuple[float, Gradient | None, StepStats]:
    """Clipped surrogate minus beta * exact KL, averaged token -> rollout -> group -> batch."""
    if not groups:
        raise DataError("no groups to optimise")
    if prompts is None:
        raise DataError("prompt lookup required")
    temp = policy.temperature
    beta = config.beta_kl
    if beta > 0 and ref_policy is None:
        raise DataError("KL penalty needs a reference policy")
    grad = Gradient(
        np.zeros_like(policy.shared_logits),
        np.zeros_like(policy.skill_logits),
        None if policy.prompt_logits is None else np.zeros_like(policy.prompt_logits),
    )
    n_groups = len(groups)
    total = surr_total = kl_total = 0.0
    ratios = []
    n_clipped = n_tok = 0
    kl_by_tier: dict[str, list[float]] = {}
    clip_by_group: dict[int, float] = {}
    kl_by_group: dict[int, float] = {}
    for g in groups:
        prompt = prompts[g.prompt_id]
        g_q = len(g.rollouts)
        g_obj = 0.0
        g_clip = g_tok = 0
        g_kl = 0.0
        for r, adv in zip(g.rollouts, g.advantages):
            n = r.length
            scale = 1.0 / (n_groups * g_q * n)
            f = r.n_forced
            g_obj += f * adv / (g_q * n)  # forced tokens: ratio fixed at 1
            if n == f:
                continue
            toks = np.asarray(r.tokens[f:], dtype=int)
            needed = _needed_rows(policy, prompt, r.tokens)
            z = _logits_rows(policy, prompt.id, needed)[f:]
            nd = needed[f:]
            lp = log_softmax(z, temp)
            p = np.exp(lp)
            rows = np.arange(len(toks))
            beh = np.asarray(r.behavior_logprobs[f:], dtype=float)
            ratio = np.exp(lp[rows, toks] - beh)
            clipped = np.clip(ratio, 1.0 - g.eps_minus, 1.0 + g.eps_plus)
            unc = ratio * adv
            clp = clipped * adv
            surr = np.minimum(unc, clp)
            active = unc <= clp
            kl = np.zeros(len(toks))
            if beta > 0:
                zr = _logits_rows(ref_policy, prompt.id, needed)[f:]
                lr = log_softmax(zr, ref_policy.temperature)
                kl = np.sum(p * (lp - lr), axis=1)
            val = float(np.sum(surr - beta * kl))
            g_obj += val / (g_q * n)
            surr_total += float(np.sum(surr)) / (n_groups * g_q * n)
            kl_total += float(np.sum(kl)) / (n_groups * g_q * n)
            kl_by_tier.setdefault(g.tier, []).extend(kl.tolist())
            g_kl += float(np.sum(kl))
            ratios.extend(ratio.tolist())
            n_clipped += int(np.sum(~active))
            g_clip += int(np.sum(~active))
            n_tok += len(toks)
            g_tok += len(toks)
            if with_grad:
                onehot = np.zeros_like(p)
                onehot[rows, toks] = 1.0
                coef = np.where(active, adv * ratio, 0.0)
                gz = coef[:, None] * (onehot - p)
                if beta > 0:
                    gz -= beta * p * (lp - lr - kl[:, None])
                gz *= scale / temp
                pos = np.arange(f, n)
                grad.shared[pos] += gz
                if grad.prompt is not None:
                    grad.prompt[prompt.id, pos] += gz
                has = nd >= 0
                np.add.at(grad.skill, (pos[has], nd[has]), gz[rows[has], nd[has]])
        if not math.isfinite(g_obj):
            raise NumericalError("non-finite objective", g.prompt_id)
        total += g_obj / n_groups
        clip_by_group[g.prompt_id] = g_clip / g_tok if g_tok else 0.0
        kl_by_group[g.prompt_id] = g_kl / g_tok if g_tok else 0.0
    stats = StepStats(
        objective=total,
        surrogate=surr_total,
        kl=kl_total,
        mean_ratio=float(np.mean(ratios)) if ratios else 1.0,
        clip_frac=n_clipped / n_tok if n_tok else 0.0,
        grad_norm=grad.norm() if with_grad else 0.0,
        n_tokens=n_tok,
        kl_by_tier={k: float(np.mean(v)) for k, v in sorted(kl_by_tier.items())},
        clip_by_group=clip_by_group,
        kl_by_group=kl_by_group,
    )
    return total, (grad if with_grad else None), stats


def grpo_step(
    policy: ToyPolicy,
    groups: Sequence[TrainGroup],
    config: TierConfig,
    ref_policy: ToyPolicy | None,
    prompts: dict[int, PromptSpec],
) -> tuple[ToyPolicy, StepStats]:
    """One gradient-ascent step; returns a new policy with snapshot_id + 1."""
    _, grad, stats = objective_and_grad(policy, groups, config, ref_policy, prompts)
    if not math.isfinite(stats.grad_norm):
        bad = next((g.prompt_id for g in groups), None)
        raise NumericalError("non-finite gradient", bad)
    new = policy.copy()
    new.shared_logits += config.lr * grad.shared
    new.skill_logits += config.lr * grad.skill
    if new.prompt_logits is not None:
        new.prompt_logits += config.lr * grad.prompt
    new.snapshot_id = policy.snapshot_id + 1
    return new, stats
