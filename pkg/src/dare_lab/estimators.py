"""Difficulty estimators.

The main estimator reweights a prompt's buffered outcomes by clipped
current-to-behaviour likelihood ratios (self-normalised importance sampling),
accepts the result only when the effective sample size clears a threshold, and
otherwise falls back to an embedding-similarity prediction from a small
reference set. The baselines (previous failure rate, fresh-rollout failure
rate, Beta-Bernoulli posterior, policy entropy, constant) share the
:class:`DifficultyEstimate` output type.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from dare_lab.buffer import BufferEntry, ReplayBuffer
from dare_lab.errors import BoundInapplicableError, DataError, DegenerateWeightsError
from dare_lab.world import (
    PromptSpec,
    ToyPolicy,
    World,
    enumerate_outcomes,
    log_softmax,
    needed_token,
    rollout,
    sample_outcomes,
    sequence_logprobs,
)

SOURCES = ("snis", "coldstart", "bayes", "prev_fr", "current_fr", "entropy", "random")
DEFAULT_LABEL = 0.5


@dataclass(frozen=True)
class DifficultyEstimate:
    value: float
    source: str
    ess: float | None = None
    k: int = 0
    mc_stderr: float | None = None

    def __post_init__(self):
        if not 0.0 <= self.value <= 1.0:
            raise ValueError(f"difficulty {self.value} outside [0, 1]")
        if self.source not in SOURCES:
            raise ValueError(f"unknown source {self.source!r}")


@dataclass
class ReferenceSet:
    prompt_ids: np.ndarray
    difficulties: np.ndarray
    embeddings: np.ndarray
    sharpness: float = 1.0  # multiplies the scaled dot-product scores

    def __post_init__(self):
        self.prompt_ids = np.asarray(self.prompt_ids, dtype=int)
        self.difficulties = np.asarray(self.difficulties, dtype=float)
        self.embeddings = np.atleast_2d(np.asarray(self.embeddings, dtype=float))
        if len(self.difficulties) == 0:
            raise DataError("reference set is empty")
        if np.any((self.difficulties < 0) | (self.difficulties > 1)):
            raise DataError("reference difficulties must lie in [0, 1]")
        if not self.sharpness > 0:
            raise DataError("sharpness must be positive")

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]

    def __len__(self) -> int:
        return len(self.difficulties)


@dataclass
class SnisConfig:
    clip: float = 4.0
    tau: float = 3.0
    delta: float = 0.05
    b_min: float | None = None

    def __post_init__(self):
        if not self.clip > 0:
            raise ValueError("clip must be positive")
        if self.tau < 1:
            raise ValueError("ESS threshold must be >= 1")
        if not 0 < self.delta < 1:
            raise ValueError("delta must lie in (0, 1)")
        if self.b_min is not None and not 0 < self.b_min <= 1:
            raise ValueError("b_min must lie in (0, 1]")


# ---------------------------------------------------------------------------
# SNIS


def log_ratio(entry: BufferEntry | object, policy: ToyPolicy, prompt: PromptSpec) -> float:
    r = entry.rollout if isinstance(entry, BufferEntry) else entry
    if any(t < 0 or t >= policy.vocab for t in r.tokens):
        raise DataError(f"prompt {prompt.id}: token outside vocabulary in buffered rollout")
    cur = sequence_logprobs(policy, prompt, r.tokens, n_forced=r.n_forced)
    beh = np.asarray(r.behavior_logprobs, dtype=float)
    beh = np.where(np.arange(len(beh)) < r.n_forced, 0.0, beh)
    return float(math.fsum(cur) - math.fsum(beh))


def snis_weights(entries: Sequence[BufferEntry], policy: ToyPolicy, prompt: PromptSpec, c: float) -> np.ndarray:
    """Clipped importance weights exp(clip(log pi - log mu, -c, c))."""
    if not entries:
        raise DataError("snis_weights needs at least one entry")
    lr = np.array([log_ratio(e, policy, prompt) for e in entries])
    return np.exp(np.clip(lr, -c, c))


def snis_difficulty(weights: Sequence[float], rewards: Sequence[int]) -> float:
    w = np.asarray(weights, dtype=float)
    r = np.asarray(rewards, dtype=float)
    if w.shape != r.shape or w.size == 0:
        raise DataError("weights and rewards must have equal, non-zero length")
    total = w.sum()
    if not total > 0:
        raise DegenerateWeightsError("importance weights sum to zero")
    return float(min(max(np.dot(w, 1.0 - r) / total, 0.0), 1.0))


def ess(weights: Sequence[float]) -> float:
    w = np.asarray(weights, dtype=float)
    total = w.sum()
    if not total > 0:
        raise DegenerateWeightsError("importance weights sum to zero")
    # normalise first so huge weights cannot overflow the square
    p = w / total
    return float(1.0 / np.dot(p, p))


# ---------------------------------------------------------------------------
# cold start


def cold_start(prompt: PromptSpec, reference: ReferenceSet) -> float:
    z = np.asarray(prompt.features, dtype=float)
    if z.shape[0] != reference.dim:
        raise DataError(f"embedding dimension {z.shape[0]} != reference dimension {reference.dim}")
    scores = reference.sharpness * (reference.embeddings @ z) / math.sqrt(reference.dim)
    a = np.exp(scores - scores.max())
    a /= a.sum()
    value = float(np.dot(a, reference.difficulties))
    lo, hi = reference.difficulties.min(), reference.difficulties.max()
    return min(max(value, lo), hi)


def build_reference(
    world: World,
    policy: ToyPolicy,
    n: int,
    g: int,
    rng: np.random.Generator,
    ids: Sequence[int] | None = None,
    sharpness: float = 1.0,
) -> ReferenceSet:
    """Roll out ``g`` responses for ``n`` reference prompts; difficulty = failure rate."""
    if ids is None:
        if n > len(world.prompts):
            raise DataError("reference size exceeds the prompt pool")
        ids = sorted(int(i) for i in rng.choice(world.train_ids, size=n, replace=False))
    prompts = [world.prompt(i) for i in ids]
    diffs = []
    for p in prompts:
        fails = sum(1 - rollout(policy, p, rng).reward for _ in range(g))
        diffs.append(fails / g)
    return ReferenceSet(
        prompt_ids=np.array([p.id for p in prompts]),
        difficulties=np.array(diffs),
        embeddings=np.stack([p.features for p in prompts]),
        sharpness=sharpness,
    )


# ---------------------------------------------------------------------------
# combined estimator


def usable_entries(entries: Sequence[BufferEntry]) -> list[BufferEntry]:
    # forced hint prefixes would bias the failure rate downwards
    return [e for e in entries if not e.rollout.hinted]


def estimate(
    prompt: PromptSpec,
    buffer: ReplayBuffer,
    policy: ToyPolicy,
    reference: ReferenceSet,
    config: SnisConfig,
) -> DifficultyEstimate:
    entries = usable_entries(buffer.entries(prompt.id))
    if not entries:
        return DifficultyEstimate(cold_start(prompt, reference), "coldstart", k=0)
    w = snis_weights(entries, policy, prompt, config.clip)
    rewards = [e.rollout.reward for e in entries]
    try:
        n_eff = ess(w)
        value = snis_difficulty(w, rewards)
    except DegenerateWeightsError:
        return DifficultyEstimate(cold_start(prompt, reference), "coldstart", ess=None, k=len(entries))
    n_eff = min(max(n_eff, 1.0), float(len(entries)))
    if n_eff >= config.tau:
        return DifficultyEstimate(value, "snis", ess=n_eff, k=len(entries))
    return DifficultyEstimate(cold_start(prompt, reference), "coldstart", ess=n_eff, k=len(entries))


# ---------------------------------------------------------------------------
# finite-sample bound


@dataclass(frozen=True)
class BoundRadius:
    eps_delta: float
    radius: float
    b_min: float
    k: int


def concentration_radius(clip: float, delta: float, k: int) -> float:
    return math.exp(clip) * math.sqrt(math.log(4.0 / delta) / (2.0 * k))


def bound_radius(config: SnisConfig, k: int, clip_bias_term: float = 0.0, b_min: float | None = None) -> BoundRadius:
    """Right-hand side of the clipped-SNIS finite-sample error bound.

    ``clip_bias_term`` is the average over behaviour distributions of
    E|rho - W|; it is divided by ``b_min`` here.
    """
    b = config.b_min if b_min is None else b_min
    if b is None:
        raise ValueError("b_min must be supplied")
    eps = concentration_radius(config.clip, config.delta, k)
    if eps >= b:
        raise BoundInapplicableError(eps, b)
    radius = 2.0 * eps / (b - eps) + clip_bias_term / b
    return BoundRadius(eps_delta=eps, radius=radius, b_min=b, k=k)


def clip_bias_term(current: ToyPolicy, behavior: ToyPolicy, prompt: PromptSpec, clip: float, *, cap: int = 10**6) -> float:
    """E_mu[(rho - e^c)_+ + (e^-c - rho)_+] by enumerating every response."""
    hi, lo = math.exp(clip), math.exp(-clip)
    total = []
    beh = {toks: lp for toks, lp, _ in enumerate_outcomes(behavior, prompt, cap=cap)}
    for toks, lp_cur, _ in enumerate_outcomes(current, prompt, cap=cap):
        lp_beh = beh[toks]
        rho = math.exp(lp_cur - lp_beh)
        total.append(math.exp(lp_beh) * (max(rho - hi, 0.0) + max(lo - rho, 0.0)))
    return math.fsum(total)


def expected_clipped_weight(current: ToyPolicy, behavior: ToyPolicy, prompt: PromptSpec, clip: float, *, cap: int = 10**6) -> float:
    """E_mu[W] by enumeration (the quantity b_min lower-bounds)."""
    cur = {toks: lp for toks, lp, _ in enumerate_outcomes(current, prompt, cap=cap)}
    out = []
    for toks, lp_beh, _ in enumerate_outcomes(behavior, prompt, cap=cap):
        w = math.exp(min(max(cur[toks] - lp_beh, -clip), clip))
        out.append(math.exp(lp_beh) * w)
    return math.fsum(out)


# ---------------------------------------------------------------------------
# baselines


def previous_fr(entries: Sequence[BufferEntry]) -> float:
    if not entries:
        return DEFAULT_LABEL
    return 1.0 - sum(e.rollout.reward for e in entries) / len(entries)


def current_fr(policy: ToyPolicy, prompt: PromptSpec, g: int, rng: np.random.Generator) -> float:
    """Failure rate of ``g`` fresh rollouts from the current policy."""
    if g < 1:
        raise ValueError("g must be >= 1")
    return 1.0 - sum(rollout(policy, prompt, rng).reward for _ in range(g)) / g


def current_fr_many(policy: ToyPolicy, prompt: PromptSpec, g: int, reps: int, rng: np.random.Generator) -> np.ndarray:
    """``reps`` independent current-FR estimates drawn in one vectorised batch."""
    out = sample_outcomes(policy, prompt, g * reps, rng)
    return 1.0 - out.rewards.reshape(reps, g).mean(axis=1)


@dataclass
class BayesState:
    alpha0: float = 1.0
    beta0: float = 1.0
    decay: float = 0.5
    params: dict[int, tuple[float, float]] = field(default_factory=dict)

    def __post_init__(self):
        if not (self.alpha0 > 0 and self.beta0 > 0):
            raise ValueError("priors must be positive")
        if not 0.0 <= self.decay <= 1.0:
            raise ValueError("decay must lie in [0, 1]")


def bayes_update(state: BayesState, prompt_id: int, successes: int, count: int) -> BayesState:
    """Discounted Beta-Bernoulli update; returns a new state."""
    if not 0 <= successes <= count:
        raise ValueError("need 0 <= successes <= count")
    lam = state.decay
    a, b = state.params.get(prompt_id, (state.alpha0, state.beta0))
    a = lam * a + (1 - lam) * state.alpha0 + successes
    b = lam * b + (1 - lam) * state.beta0 + (count - successes)
    params = dict(state.params)
    params[prompt_id] = (a, b)
    return BayesState(state.alpha0, state.beta0, state.decay, params)


def bayes_estimate(state: BayesState, prompt_id: int, rng: np.random.Generator) -> float:
    """Thompson draw of the failure rate; untracked prompts get 0.5."""
    if prompt_id not in state.params:
        return DEFAULT_LABEL
    a, b = state.params[prompt_id]
    return float(1.0 - rng.beta(a, b))


def entropy_score(policy: ToyPolicy, prompt: PromptSpec, l_prefix: int, rng: np.random.Generator) -> float:
    """Mean per-position entropy (nats) along one sampled prefix."""
    if l_prefix > policy.t_max:
        raise ValueError("prefix longer than T_max")
    prefix: list[int] = []
    ents = []
    for t in range(l_prefix):
        lp = log_softmax(policy.logits(prompt.id, t, needed_token(policy, prompt, prefix)), policy.temperature)
        p = np.exp(lp)
        nz = p > 0
        ents.append(float(-np.sum(p[nz] * lp[nz])))
        tok = min(int(np.searchsorted(np.cumsum(p), rng.random(), side="right")), policy.vocab - 1)
        prefix.append(tok)
        if tok == policy.eos_token:
            break
    return float(np.mean(ents)) if ents else 0.0


def random_estimate() -> float:
    return DEFAULT_LABEL
