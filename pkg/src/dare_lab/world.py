"""Synthetic task universe and the tabular softmax sequence policy.

A prompt asks the policy to emit a short target token sequence. The policy's
logits at a position are the sum of

* ``shared_logits[t]``: a prompt-independent bias (token popularity, EOS and
  filler propensity),
* ``prompt_logits[q, t]``: optional per-prompt memorisation capacity,
* ``skill_logits[t, v]``: added to token ``v`` only when ``v`` is the token the
  prompt still needs next (the next target token, or EOS once the target is
  complete).

The skill block is what lets training on one prompt transfer to held-out
prompts. A filler token, when enabled, is ignored by the correctness check, so
correct responses can differ in length.

Because the logits depend on the prefix only through "how much of the target
has been matched", success probability and expected length are computable
exactly by a small dynamic program (:func:`exact_outcome_stats`), and for small
worlds by brute-force enumeration (:func:`enumerate_outcomes`).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Iterator, Sequence

import numpy as np

from dare_lab import rng as rngmod
from dare_lab.errors import ConfigError, HintFormatError

GREEDY_TEMPERATURE = 1e-6
N_FAMILIES = 3


@dataclass(frozen=True)
class PromptSpec:
    id: int
    target: tuple[int, ...]
    features: np.ndarray = field(compare=False, repr=False)
    group_label: int = 0

    @property
    def length(self) -> int:
        return len(self.target)


@dataclass
class ToyPolicy:
    shared_logits: np.ndarray
    skill_logits: np.ndarray
    prompt_logits: np.ndarray | None = None
    temperature: float = 1.0
    eos_token: int | None = None
    filler_token: int | None = None
    snapshot_id: int = 0

    @property
    def t_max(self) -> int:
        return self.shared_logits.shape[0]

    @property
    def vocab(self) -> int:
        return self.shared_logits.shape[1]

    def copy(self) -> "ToyPolicy":
        return replace(
            self,
            shared_logits=self.shared_logits.copy(),
            skill_logits=self.skill_logits.copy(),
            prompt_logits=None if self.prompt_logits is None else self.prompt_logits.copy(),
        )

    def base_logits(self, prompt_id: int, position: int) -> np.ndarray:
        z = self.shared_logits[position]
        if self.prompt_logits is not None:
            z = z + self.prompt_logits[prompt_id, position]
        return z

    def logits(self, prompt_id: int, position: int, needed: int | None) -> np.ndarray:
        z = np.array(self.base_logits(prompt_id, position), dtype=float)
        if needed is not None:
            z[needed] += self.skill_logits[position, needed]
        return z


@dataclass(frozen=True)
class Rollout:
    tokens: tuple[int, ...]
    length: int
    reward: int
    behavior_logprobs: tuple[float, ...]
    behavior_snapshot: int
    hinted: bool = False
    step: int = 0
    n_forced: int = 0

    def logprob_sum(self) -> float:
        return float(math.fsum(self.behavior_logprobs))


@dataclass
class WorldConfig:
    n_prompts: int = 64
    vocab: int = 6
    t_max: int = 6
    n_reference: int = 16
    family_weights: tuple[float, ...] = (1 / 3, 1 / 3, 1 / 3)
    eos_enabled: bool = True
    filler_enabled: bool | None = None
    prompt_logits: bool = False
    n_heldout: int = 64
    temperature: float = 1.0
    token_spread: float = 4.0
    eos_bias: float = 1.0
    filler_bias: float = -1.0
    skill_init: float = 3.0
    prompt_noise: float = 0.0
    seed: int = 0

    def __post_init__(self):
        self.family_weights = tuple(float(w) for w in self.family_weights)
        if self.filler_enabled is None:
            self.filler_enabled = bool(self.eos_enabled)

    def validate(self) -> None:
        if self.n_prompts < 8:
            raise ConfigError("n_prompts", f"must be >= 8, got {self.n_prompts}")
        if not 2 <= self.vocab <= 16:
            raise ConfigError("vocab", f"must lie in [2, 16], got {self.vocab}")
        if not 2 <= self.t_max <= 12:
            raise ConfigError("t_max", f"must lie in [2, 12], got {self.t_max}")
        if len(self.family_weights) != N_FAMILIES:
            raise ConfigError("family_weights", f"needs {N_FAMILIES} entries")
        if any(w < 0 for w in self.family_weights) or sum(self.family_weights) <= 0:
            raise ConfigError("family_weights", "must be non-negative with positive sum")
        if self.n_reference < 1 or self.n_reference > self.n_prompts:
            raise ConfigError("n_reference", f"must lie in [1, n_prompts], got {self.n_reference}")
        if self.n_heldout < 0:
            raise ConfigError("n_heldout", "must be non-negative")
        if not self.temperature > 0:
            raise ConfigError("temperature", "must be positive")
        if self.prompt_noise < 0:
            raise ConfigError("prompt_noise", "must be non-negative")
        n_special = int(self.eos_enabled) + int(bool(self.filler_enabled))
        if self.vocab - n_special < 1:
            raise ConfigError("vocab", "no answer tokens left after EOS/filler")


@dataclass
class World:
    config: WorldConfig
    prompts: list[PromptSpec]
    heldout: list[PromptSpec]
    reference_ids: tuple[int, ...]
    vocab: int
    t_max: int
    seed: int
    eos_token: int | None
    filler_token: int | None

    def __post_init__(self):
        self._by_id = {p.id: p for p in self.prompts}
        self._by_id.update({p.id: p for p in self.heldout})

    def prompt(self, prompt_id: int) -> PromptSpec:
        return self._by_id[prompt_id]

    @property
    def train_ids(self) -> list[int]:
        return [p.id for p in self.prompts]

    @property
    def n_total(self) -> int:
        return len(self.prompts) + len(self.heldout)


# ---------------------------------------------------------------------------
# world construction


def _token_layout(cfg: WorldConfig) -> tuple[list[int], int | None, int | None]:
    v = cfg.vocab
    eos = v - 1 if cfg.eos_enabled else None
    top = v - 1 if cfg.eos_enabled else v
    filler = top - 1 if cfg.filler_enabled else None
    n_answer = top - (1 if cfg.filler_enabled else 0)
    return list(range(n_answer)), eos, filler


def _length_range(cfg: WorldConfig, family: int) -> tuple[int, int]:
    if not cfg.eos_enabled and not cfg.filler_enabled:
        return cfg.t_max, cfg.t_max
    hi = cfg.t_max - 1 if cfg.filler_enabled and cfg.t_max > 2 else cfg.t_max
    if cfg.eos_enabled and cfg.filler_enabled:
        hi = max(1, cfg.t_max - 2)
    cuts = np.linspace(1, hi + 1, N_FAMILIES + 1)
    lo_f = int(math.floor(cuts[family]))
    hi_f = max(lo_f, int(math.floor(cuts[family + 1])) - 1)
    return max(1, lo_f), min(hi, hi_f)


def prompt_features(target: Sequence[int], vocab: int, t_max: int, family: int) -> np.ndarray:
    hist = np.bincount(np.asarray(target, dtype=int), minlength=vocab).astype(float)
    hist /= max(len(target), 1)
    onehot = np.zeros(N_FAMILIES)
    onehot[family] = 1.0
    z = np.concatenate([hist, [len(target) / t_max], onehot])
    return z / np.linalg.norm(z)


def _make_prompt(pid: int, family: int, cfg: WorldConfig, answer: list[int], rng) -> PromptSpec:
    lo, hi = _length_range(cfg, family)
    length = int(rng.integers(lo, hi + 1))
    n = len(answer)
    # easy families draw popular (low-index) tokens, hard ones draw rare tokens
    ranks = np.arange(n, dtype=float)
    tilt = (1 - family) * 1.5
    probs = np.exp(-tilt * ranks / max(n - 1, 1))
    probs /= probs.sum()
    target = tuple(int(answer[i]) for i in rng.choice(n, size=length, p=probs))
    return PromptSpec(
        id=pid,
        target=target,
        features=prompt_features(target, cfg.vocab, cfg.t_max, family),
        group_label=family,
    )


def make_world(config: WorldConfig | dict) -> World:
    cfg = config if isinstance(config, WorldConfig) else WorldConfig(**config)
    cfg.validate()
    answer, eos, filler = _token_layout(cfg)
    weights = np.asarray(cfg.family_weights, dtype=float)
    weights = weights / weights.sum()
    gen = rngmod.stream(cfg.seed, rngmod.WORLD)
    n_all = cfg.n_prompts + cfg.n_heldout
    families = gen.choice(N_FAMILIES, size=n_all, p=weights)
    prompts = [_make_prompt(i, int(families[i]), cfg, answer, gen) for i in range(n_all)]
    ref = gen.choice(cfg.n_prompts, size=cfg.n_reference, replace=False)
    return World(
        config=cfg,
        prompts=prompts[: cfg.n_prompts],
        heldout=prompts[cfg.n_prompts :],
        reference_ids=tuple(sorted(int(i) for i in ref)),
        vocab=cfg.vocab,
        t_max=cfg.t_max,
        seed=cfg.seed,
        eos_token=eos,
        filler_token=filler,
    )


def initial_policy(world: World) -> ToyPolicy:
    """Starting policy: popular answer tokens favoured, uniform skill bonus."""
    cfg = world.config
    answer, eos, filler = _token_layout(cfg)
    bias = np.zeros(world.vocab)
    n = len(answer)
    if n > 1:
        bias[answer] = cfg.token_spread * (0.5 - np.arange(n) / (n - 1))
    if eos is not None:
        bias[eos] = cfg.eos_bias
    if filler is not None:
        bias[filler] = cfg.filler_bias
    shared = np.tile(bias, (world.t_max, 1))
    skill = np.full((world.t_max, world.vocab), float(cfg.skill_init))
    per_prompt = None
    if cfg.prompt_logits or cfg.prompt_noise > 0:
        # fixed per-prompt quirks; they make greedy success vary prompt by prompt
        g = rngmod.stream(world.seed, rngmod.INIT)
        per_prompt = cfg.prompt_noise * g.standard_normal((world.n_total, world.t_max, world.vocab))
    return ToyPolicy(
        shared_logits=shared,
        skill_logits=skill,
        prompt_logits=per_prompt,
        temperature=cfg.temperature,
        eos_token=eos,
        filler_token=filler,
    )


def uniform_policy(world: World, temperature: float = 1.0) -> ToyPolicy:
    return ToyPolicy(
        shared_logits=np.zeros((world.t_max, world.vocab)),
        skill_logits=np.zeros((world.t_max, world.vocab)),
        prompt_logits=None,
        temperature=temperature,
        eos_token=world.eos_token,
        filler_token=world.filler_token,
    )


# ---------------------------------------------------------------------------
# decoding


def _needed(target: Sequence[int], matched: int, eos: int | None) -> int | None:
    return target[matched] if matched < len(target) else eos


class _Progress:
    """Tracks how much of the target a growing prefix has matched."""

    __slots__ = ("target", "eos", "filler", "matched", "dead")

    def __init__(self, target, eos, filler):
        self.target = target
        self.eos = eos
        self.filler = filler
        self.matched = 0
        self.dead = False

    def needed(self) -> int | None:
        if self.dead:
            return None
        return _needed(self.target, self.matched, self.eos)

    def push(self, tok: int) -> None:
        if self.dead or tok == self.filler or tok == self.eos:
            return
        if self.matched < len(self.target) and tok == self.target[self.matched]:
            self.matched += 1
        else:
            self.dead = True


def needed_token(policy: ToyPolicy, prompt: PromptSpec, prefix: Sequence[int]) -> int | None:
    prog = _Progress(prompt.target, policy.eos_token, policy.filler_token)
    for tok in prefix:
        prog.push(int(tok))
    return prog.needed()


def softmax_probs(z: np.ndarray, temperature: float) -> np.ndarray:
    if temperature < GREEDY_TEMPERATURE:
        z = np.asarray(z, dtype=float)
        out = np.zeros_like(z)
        np.put_along_axis(out, np.argmax(z, axis=-1)[..., None], 1.0, axis=-1)
        return out
    s = z / temperature
    s = s - s.max(axis=-1, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(z: np.ndarray, temperature: float) -> np.ndarray:
    if temperature < GREEDY_TEMPERATURE:
        z = np.asarray(z, dtype=float)
        out = np.full_like(z, -np.inf)
        np.put_along_axis(out, np.argmax(z, axis=-1)[..., None], 0.0, axis=-1)
        return out
    s = z / temperature
    m = s.max(axis=-1, keepdims=True)
    return s - (m + np.log(np.exp(s - m).sum(axis=-1, keepdims=True)))


def decode_distribution(policy: ToyPolicy, prompt: PromptSpec, position: int, prefix: Sequence[int]) -> np.ndarray:
    needed = needed_token(policy, prompt, prefix)
    return softmax_probs(policy.logits(prompt.id, position, needed), policy.temperature)


def is_success(prompt: PromptSpec, tokens: Sequence[int], eos: int | None, filler: int | None) -> bool:
    emitted = []
    for tok in tokens:
        if tok == eos:
            break
        if tok != filler:
            emitted.append(int(tok))
    return tuple(emitted) == prompt.target


def sequence_logprobs(policy: ToyPolicy, prompt: PromptSpec, tokens: Sequence[int], n_forced: int = 0) -> np.ndarray:
    """Per-token log-probabilities of ``tokens`` under the decoding distribution.

    Forced (hint) positions contribute exactly 0.
    """
    n = len(tokens)
    out = np.zeros(n)
    if n == 0:
        return out
    prog = _Progress(prompt.target, policy.eos_token, policy.filler_token)
    needed = np.full(n, -1, dtype=int)
    for t, tok in enumerate(tokens):
        nd = prog.needed()
        needed[t] = -1 if nd is None else nd
        prog.push(int(tok))
    z = np.array(policy.shared_logits[:n], dtype=float)
    if policy.prompt_logits is not None:
        z = z + policy.prompt_logits[prompt.id, :n]
    rows = np.nonzero(needed >= 0)[0]
    z[rows, needed[rows]] += policy.skill_logits[rows, needed[rows]]
    lp = log_softmax(z, policy.temperature)
    out = lp[np.arange(n), np.asarray(tokens, dtype=int)]
    out[:n_forced] = 0.0
    return out


def _draw(p: np.ndarray, u: float) -> int:
    idx = int(np.searchsorted(np.cumsum(p), u, side="right"))
    return min(idx, len(p) - 1)


def forced_prefix_length(prompt: PromptSpec) -> int:
    return math.ceil(prompt.length / 2)


def rollout(
    policy: ToyPolicy,
    prompt: PromptSpec,
    rng: np.random.Generator,
    hint: Rollout | None = None,
    *,
    max_len: int | None = None,
    step: int = 0,
) -> Rollout:
    """Sample one response autoregressively until EOS or the length limit.

    With a hint, the first ceil(L_q/2) tokens are copied from the hint
    trajectory and recorded with log-probability 0.
    """
    limit = policy.t_max if max_len is None else min(max_len, policy.t_max)
    forced: tuple[int, ...] = ()
    if hint is not None:
        k = forced_prefix_length(prompt)
        if len(hint.tokens) < k:
            raise HintFormatError(f"hint has {len(hint.tokens)} tokens, need at least {k}")
        forced = tuple(int(t) for t in hint.tokens[:k])
        if policy.eos_token is not None and policy.eos_token in forced:
            raise HintFormatError("hint prefix contains EOS")
    prog = _Progress(prompt.target, policy.eos_token, policy.filler_token)
    tokens: list[int] = []
    logps: list[float] = []
    for t in range(limit):
        if t < len(forced):
            tok = forced[t]
            logps.append(0.0)
        else:
            z = policy.logits(prompt.id, t, prog.needed())
            lp = log_softmax(z, policy.temperature)
            tok = _draw(np.exp(lp), rng.random())
            logps.append(float(lp[tok]))
        tokens.append(tok)
        prog.push(tok)
        if tok == policy.eos_token:
            break
    reward = int(is_success(prompt, tokens, policy.eos_token, policy.filler_token))
    return Rollout(
        tokens=tuple(tokens),
        length=len(tokens),
        reward=reward,
        behavior_logprobs=tuple(logps),
        behavior_snapshot=policy.snapshot_id,
        hinted=hint is not None,
        step=step,
        n_forced=len(forced),
    )


def greedy_rollout(policy: ToyPolicy, prompt: PromptSpec, *, max_len: int | None = None) -> Rollout:
    greedy = replace(policy, temperature=GREEDY_TEMPERATURE / 10)
    return rollout(greedy, prompt, np.random.default_rng(0), max_len=max_len)


# ---------------------------------------------------------------------------
# bulk sampling and exact oracles


@dataclass
class OutcomeBatch:
    rewards: np.ndarray
    lengths: np.ndarray
    logprob: np.ndarray
    tokens: np.ndarray  # padded with -1


def sample_outcomes(
    policy: ToyPolicy,
    prompt: PromptSpec,
    n: int,
    rng: np.random.Generator,
    *,
    max_len: int | None = None,
) -> OutcomeBatch:
    """Draw ``n`` independent responses at once (vectorised over responses).

    Same distribution as :func:`rollout`, different random stream consumption;
    meant for Monte Carlo work where per-rollout streams are unnecessary.
    """
    limit = policy.t_max if max_len is None else min(max_len, policy.t_max)
    target = np.asarray(prompt.target + (-1,), dtype=int)
    L = prompt.length
    eos, filler = policy.eos_token, policy.filler_token
    matched = np.zeros(n, dtype=int)
    dead = np.zeros(n, dtype=bool)
    done = np.zeros(n, dtype=bool)
    lengths = np.zeros(n, dtype=int)
    logprob = np.zeros(n)
    tokens = np.full((n, limit), -1, dtype=int)
    rows = np.arange(n)
    for t in range(limit):
        active = ~done
        if not active.any():
            break
        base = policy.base_logits(prompt.id, t)
        z = np.tile(base, (n, 1))
        needed = np.where(matched < L, target[np.minimum(matched, L)], -1 if eos is None else eos)
        needed = np.where(dead, -1, needed)
        has = needed >= 0
        z[rows[has], needed[has]] += policy.skill_logits[t, needed[has]]
        if policy.temperature < GREEDY_TEMPERATURE:
            tok = np.argmax(z, axis=1)
            lp_tok = np.zeros(n)
        else:
            lp = log_softmax(z, policy.temperature)
            cdf = np.cumsum(np.exp(lp), axis=1)
            u = rng.random(n)
            tok = np.minimum((cdf <= u[:, None]).sum(axis=1), policy.vocab - 1)
            lp_tok = lp[rows, tok]
        tok = np.where(active, tok, -1)
        tokens[:, t] = tok
        logprob += np.where(active, lp_tok, 0.0)
        lengths += active
        is_eos = active & (tok == eos) if eos is not None else np.zeros(n, dtype=bool)
        is_fill = active & (tok == filler) if filler is not None else np.zeros(n, dtype=bool)
        adv = active & ~is_eos & ~is_fill & ~dead & (matched < L) & (tok == target[np.minimum(matched, L)])
        kill = active & ~is_eos & ~is_fill & ~adv
        matched += adv
        dead |= kill
        done |= is_eos
    rewards = (~dead & (matched == L)).astype(int)
    return OutcomeBatch(rewards=rewards, lengths=lengths, logprob=logprob, tokens=tokens)


def n_sequences_bound(policy: ToyPolicy, max_len: int | None = None) -> int:
    limit = policy.t_max if max_len is None else max_len
    return policy.vocab**limit


def enumerate_outcomes(
    policy: ToyPolicy,
    prompt: PromptSpec,
    *,
    max_len: int | None = None,
    cap: int = 10**6,
) -> Iterator[tuple[tuple[int, ...], float, int]]:
    """Yield every terminating response with its log-probability and reward.

    Brute-force depth-first enumeration; refuses worlds with V**T_max > cap.
    """
    limit = policy.t_max if max_len is None else min(max_len, policy.t_max)
    if policy.vocab**limit > cap:
        raise OverflowError(f"V^T = {policy.vocab ** limit} exceeds enumeration cap {cap}")
    eos = policy.eos_token

    def walk(prefix: list[int], logp: float):
        t = len(prefix)
        if t == limit:
            yield tuple(prefix), logp, int(is_success(prompt, prefix, eos, policy.filler_token))
            return
        lp = log_softmax(policy.logits(prompt.id, t, needed_token(policy, prompt, prefix)), policy.temperature)
        for v in range(policy.vocab):
            if lp[v] == -np.inf:
                continue
            prefix.append(v)
            if v == eos:
                yield tuple(prefix), logp + lp[v], int(is_success(prompt, prefix, eos, policy.filler_token))
            else:
                yield from walk(prefix, logp + lp[v])
            prefix.pop()

    yield from walk([], 0.0)


def exact_outcome_stats(policy: ToyPolicy, prompt: PromptSpec, *, max_len: int | None = None) -> tuple[float, float]:
    """Exact (success probability, expected generated length).

    Dynamic program over "matched k target tokens so far" plus an absorbing
    failed state; valid because the logits depend on the prefix only through
    that count.
    """
    limit = policy.t_max if max_len is None else min(max_len, policy.t_max)
    L = prompt.length
    eos, filler = policy.eos_token, policy.filler_token
    alive = np.zeros(L + 1)
    alive[0] = 1.0
    dead = 0.0
    p_success = 0.0
    e_len = 0.0
    for t in range(limit):
        if dead > 0.0:
            p0 = softmax_probs(policy.logits(prompt.id, t, None), policy.temperature)
            stop0 = p0[eos] if eos is not None else 0.0
            e_len += dead * stop0 * (t + 1)
            dead *= 1.0 - stop0
        new_alive = np.zeros(L + 1)
        for m in range(L + 1):
            mass = alive[m]
            if mass == 0.0:
                continue
            needed = _needed(prompt.target, m, eos)
            p = softmax_probs(policy.logits(prompt.id, t, needed), policy.temperature)
            stay = p[filler] if filler is not None else 0.0
            advance = p[prompt.target[m]] if m < L else 0.0
            stop = p[eos] if eos is not None else 0.0
            if m == L:
                p_success += mass * stop
            e_len += mass * stop * (t + 1)
            new_alive[m] += mass * stay
            if m < L:
                new_alive[m + 1] += mass * advance
            dead += mass * max(0.0, 1.0 - stay - advance - stop)
        alive = new_alive
    p_success += alive[L]
    e_len += (alive.sum() + dead) * limit
    return float(min(max(p_success, 0.0), 1.0)), float(e_len)


def exact_difficulty(policy: ToyPolicy, prompt: PromptSpec, *, max_len: int | None = None) -> float:
    return 1.0 - exact_outcome_stats(policy, prompt, max_len=max_len)[0]


@dataclass(frozen=True)
class OracleResult:
    value: float
    method: str  # "enumeration" or "monte_carlo"
    stderr: float = 0.0

    @property
    def exact(self) -> bool:
        return self.method == "enumeration"

    def __float__(self) -> float:
        return self.value


def true_difficulty(
    policy: ToyPolicy,
    prompt: PromptSpec,
    *,
    cap: int = 10**6,
    rng: np.random.Generator | None = None,
    mc_samples: int = 200_000,
) -> OracleResult:
    """Failure probability by enumerating every terminating response.

    Falls back to Monte Carlo (flagged, with standard error) above ``cap``.
    """
    if policy.vocab**policy.t_max <= cap:
        p = math.fsum(math.exp(lp) for _, lp, r in enumerate_outcomes(policy, prompt, cap=cap) if r)
        return OracleResult(value=min(max(1.0 - p, 0.0), 1.0), method="enumeration")
    gen = rng if rng is not None else np.random.default_rng(0)
    out = sample_outcomes(policy, prompt, mc_samples, gen)
    d = 1.0 - out.rewards.mean()
    return OracleResult(value=float(d), method="monte_carlo", stderr=float(math.sqrt(max(d * (1 - d), 0.0) / mc_samples)))


def batch_difficulty(policy: ToyPolicy, prompts: Sequence[PromptSpec]) -> np.ndarray:
    return np.array([exact_difficulty(policy, p) for p in prompts])
