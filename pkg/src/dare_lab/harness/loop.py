"""Experiment orchestration: training loop, estimator benchmark, bound check."""

from __future__ import annotations

import logging
import math
import traceback
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from dare_lab import rng as rngmod
from dare_lab.buffer import BufferEntry, ReplayBuffer
from dare_lab.errors import BoundInapplicableError, DareLabError
from dare_lab.estimators import (
    BayesState,
    DifficultyEstimate,
    SnisConfig,
    bayes_estimate,
    bayes_update,
    bound_radius,
    build_reference,
    clip_bias_term,
    cold_start,
    current_fr,
    entropy_score,
    estimate,
    expected_clipped_weight,
    previous_fr,
    usable_entries,
)
from dare_lab.harness.artifacts import write_csv, write_json, write_manifest
from dare_lab.harness.config import ExperimentConfig
from dare_lab.metrics import (
    AccuracyCurve,
    auc,
    estimator_report,
    steps_to_target,
    tier_token_report,
)
from dare_lab.parallel import parallel_map
from dare_lab.sampler import compute_weights, sample_batch
from dare_lab.trainer import BatchItem, TrainGroup, build_groups, grpo_step
from dare_lab.world import (
    ToyPolicy,
    World,
    enumerate_outcomes,
    exact_difficulty,
    exact_outcome_stats,
    greedy_rollout,
    initial_policy,
    make_world,
    sample_outcomes,
)

log = logging.getLogger(__name__)

TRAIN_LOG_COLUMNS = (
    "step", "prompt_id", "tier", "d_hat", "source", "g_q", "n_replay", "n_hinted",
    "mean_reward", "mean_shaped", "mean_len", "clip_frac", "kl",
)
ESTIMATOR_COLUMNS = ("step", "prompt_id", "method", "estimate", "ess", "k", "true_difficulty", "abs_err")
CURVE_COLUMNS = ("step", "method", "accuracy")
TIER_COLUMNS = ("tier", "mean_tokens", "accuracy", "count")
TARGET_GRID = tuple(round(0.05 * i, 2) for i in range(1, 21))

_METHOD_CODES = {"snis": 1, "random": 2, "prev_fr": 3, "coldstart": 4, "bayes": 5, "entropy": 6, "current_fr": 7}


class RunError(DareLabError):
    def __init__(self, phase: str, step: int, cause: BaseException):
        self.phase = phase
        self.step = step
        self.cause = cause
        super().__init__(f"{phase} failed at step {step}: {type(cause).__name__}: {cause}")

    def report(self) -> dict:
        return {
            "phase": self.phase,
            "step": self.step,
            "error": type(self.cause).__name__,
            "message": str(self.cause),
            "traceback": traceback.format_exception(type(self.cause), self.cause, self.cause.__traceback__),
        }


@dataclass
class RunReport:
    config: dict
    summary: dict
    manifest: dict[str, str]
    out_dir: Path | None = None
    curve: AccuracyCurve | None = None
    policy: ToyPolicy | None = None
    world: World | None = None
    extras: dict = field(default_factory=dict)


class _Lab:
    """Mutable state of one run: policy, replay buffer, estimators."""

    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        self.seed = cfg.run.seed
        self.world = make_world(cfg.world)
        self.policy = initial_policy(self.world)
        self.ref_policy = self.policy.copy()
        self.prompts = {p.id: p for p in self.world.prompts + self.world.heldout}
        self.buffer = ReplayBuffer(self.world.train_ids, cfg.buffer.k_cap, cfg.buffer.c)
        e = cfg.estimator
        self.snis_cfg = e.snis()
        self.reference = build_reference(
            self.world,
            self.policy,
            len(self.world.reference_ids),
            e.reference_g,
            rngmod.stream(self.seed, rngmod.REFERENCE),
            ids=self.world.reference_ids,
            sharpness=e.coldstart_sharpness,
        )
        self.bayes = BayesState(e.bayes_alpha0, e.bayes_beta0, e.bayes_decay)
        self.estimates: dict[int, DifficultyEstimate] = {}
        self.train_rows: list[tuple] = []
        self.curve: list[tuple[int, float]] = []
        self.tokens_generated = 0
        self.tier_counts = {"easy": 0, "medium": 0, "hard": 0}
        self.seen_train_ids: set[int] = set()

    # -- phase 1 ------------------------------------------------------------

    def estimate_one(self, method: str, pid: int, step: int, snis_cfg: SnisConfig | None = None) -> DifficultyEstimate:
        prompt = self.prompts[pid]
        code = _METHOD_CODES[method]
        if method == "snis":
            return estimate(prompt, self.buffer, self.policy, self.reference, snis_cfg or self.snis_cfg)
        if method == "random":
            return DifficultyEstimate(0.5, "random")
        if method == "prev_fr":
            entries = usable_entries(self.buffer.entries(pid))
            return DifficultyEstimate(previous_fr(entries), "prev_fr", k=len(entries))
        if method == "coldstart":
            return DifficultyEstimate(cold_start(prompt, self.reference), "coldstart")
        if method == "bayes":
            g = rngmod.stream(self.seed, rngmod.ESTIMATE, step, pid, code)
            return DifficultyEstimate(bayes_estimate(self.bayes, pid, g), "bayes")
        if method == "entropy":
            g = rngmod.stream(self.seed, rngmod.ESTIMATE, step, pid, code)
            h = entropy_score(self.policy, prompt, self.cfg.estimator.entropy_l_prefix, g)
            return DifficultyEstimate(min(h / math.log(self.policy.vocab), 1.0), "entropy", mc_stderr=None, k=0)
        if method == "current_fr":
            g = rngmod.stream(self.seed, rngmod.ESTIMATE, step, pid, code)
            n = self.cfg.estimator.current_fr_g
            return DifficultyEstimate(current_fr(self.policy, prompt, n, g), "current_fr", k=n)
        raise ValueError(method)

    def estimate_all(self, step: int) -> dict[int, DifficultyEstimate]:
        method = self.cfg.estimator.method
        stride = self.cfg.run.estimate_stride
        ids = [pid for pid in self.world.train_ids if pid % stride == step % stride or pid not in self.estimates]
        results = parallel_map(lambda pid: self.estimate_one(method, pid, step), ids)
        for pid, est in zip(ids, results):
            self.estimates[pid] = est
        return self.estimates

    # -- phase 2 ------------------------------------------------------------

    def select(self, step: int) -> list[int]:
        mode = self.cfg.resolved_sampler_mode()
        if mode == "entropy_softmax" and self.cfg.estimator.method == "entropy":
            scores = {pid: e.value * math.log(self.policy.vocab) for pid, e in self.estimates.items()}
        else:
            scores = {pid: e.value for pid, e in self.estimates.items()}
        weights = compute_weights(scores, mode, kappa=self.cfg.sampler.kappa, tau_ent=self.cfg.sampler.tau_ent)
        g = rngmod.stream(self.seed, rngmod.SAMPLER, step)
        b = self.cfg.sampler.batch_size
        positive = [int(pid) for pid, w in zip(weights.prompt_ids, weights.weights) if w > 0]
        if len(positive) >= b:
            return sorted(sample_batch(weights, b, g))
        if not self.cfg.run.fill_shortfall and positive:
            return sorted(sample_batch(weights, b, g))
        # saturated estimates (0 or 1) carry no weight; top up uniformly so
        # the step keeps its rollout budget and stale prompts get refreshed
        rest = sorted(set(int(i) for i in weights.prompt_ids) - set(positive))
        extra = g.choice(len(rest), size=b - len(positive), replace=False)
        return sorted(positive + [rest[i] for i in extra])

    # -- phase 3 ------------------------------------------------------------

    def train(self, step: int, batch: list[int]) -> list[TrainGroup]:
        items = [BatchItem(self.prompts[pid], self.estimates[pid]) for pid in batch]
        groups = build_groups(items, self.buffer, self.policy, self.cfg.trainer, self.seed, step, push=False)
        self.policy, stats = grpo_step(self.policy, groups, self.cfg.trainer, self.ref_policy, self.prompts)
        for g in groups:
            for r in g.fresh:
                self.buffer.push(BufferEntry(g.prompt_id, r))
            std = [r for r in g.fresh if not r.hinted]
            if std:
                self.bayes = bayes_update(self.bayes, g.prompt_id, sum(r.reward for r in std), len(std))
            self.tokens_generated += sum(r.length for r in g.fresh)
            self.tier_counts[g.tier] += 1
            self.seen_train_ids.add(g.prompt_id)
            rewards = [r.reward for r in g.rollouts]
            self.train_rows.append(
                (
                    step, g.prompt_id, g.tier, g.d_hat, g.source, len(g.rollouts), g.n_replay, g.n_hinted,
                    float(np.mean(rewards)), float(np.mean(g.shaped_rewards)),
                    float(np.mean([r.length for r in g.rollouts])),
                    stats.clip_by_group.get(g.prompt_id, 0.0), stats.kl_by_group.get(g.prompt_id, 0.0),
                )
            )
        return groups

    def drift(self, step: int) -> None:
        d = self.cfg.run.drift
        if not d.active(step):
            return
        g = rngmod.stream(self.seed, rngmod.DRIFT, step)
        new = self.policy.copy()
        new.shared_logits += d.scale * g.standard_normal(new.shared_logits.shape)
        if d.skill_scale:
            new.skill_logits += d.skill_scale * g.standard_normal(new.skill_logits.shape)
        new.snapshot_id = self.policy.snapshot_id + 1
        self.policy = new

    # -- evaluation ---------------------------------------------------------

    def heldout(self):
        return self.world.heldout[: self.cfg.run.eval_set_size]

    def evaluate(self, step: int) -> float:
        outs = parallel_map(lambda p: greedy_rollout(self.policy, p).reward, self.heldout())
        acc = float(np.mean(outs))
        self.curve.append((step, acc))
        return acc

    def true_difficulties(self, prompts) -> np.ndarray:
        return np.array(parallel_map(lambda p: exact_difficulty(self.policy, p), prompts))


def _guard(phase: str, step: int, fn: Callable, *args):
    try:
        return fn(*args)
    except RunError:
        raise
    except Exception as exc:  # noqa: BLE001 - re-raised with phase/step context
        raise RunError(phase, step, exc) from exc


def _eval_steps(cfg: ExperimentConfig) -> set[int]:
    n = cfg.run.n_steps
    return {s for s in range(0, n + 1) if s % cfg.run.eval_every == 0} | {n}


def _prepare_out(cfg: ExperimentConfig, out_dir: str | Path | None) -> Path | None:
    target = out_dir if out_dir is not None else cfg.run.output_dir
    if target is None:
        return None
    p = Path(target)
    p.mkdir(parents=True, exist_ok=True)
    write_json(p / "config.json", cfg.to_dict())
    return p


def _curve_summary(curve: AccuracyCurve) -> dict:
    out = {
        "final_accuracy": float(curve.accuracy[-1]),
        "max_accuracy": float(curve.accuracy.max()),
        "initial_accuracy": float(curve.accuracy[0]),
        "steps_to_target": {f"{t:.2f}": steps_to_target(curve, t) for t in TARGET_GRID},
    }
    out["auc"] = auc(curve) if curve.steps.size >= 2 else None
    return out


def _train_loop(lab: _Lab, on_eval: Callable[[int], None]) -> None:
    cfg = lab.cfg
    evals = _eval_steps(cfg)
    _guard("evaluate", 0, lab.evaluate, 0)
    on_eval(0)
    for step in range(cfg.run.n_steps):
        _guard("drift", step, lab.drift, step)
        _guard("estimate", step, lab.estimate_all, step)
        batch = _guard("select", step, lab.select, step)
        _guard("optimize", step, lab.train, step, batch)
        if step + 1 in evals:
            _guard("evaluate", step + 1, lab.evaluate, step + 1)
            on_eval(step + 1)


def _write_common(lab: _Lab, out: Path, est_rows: list[tuple]) -> None:
    cfg = lab.cfg
    write_csv(out / "curves.csv", CURVE_COLUMNS, [(s, cfg.label, a) for s, a in lab.curve])
    write_csv(out / "train_log.csv", TRAIN_LOG_COLUMNS, lab.train_rows)
    write_csv(out / "estimators.csv", ESTIMATOR_COLUMNS, est_rows)
    held = lab.heldout()
    d = lab.true_difficulties(held)
    rows = []
    for p, dq in zip(held, d):
        r = greedy_rollout(lab.policy, p)
        rows.append((dq, r.length, r.reward))
    table = tier_token_report(rows, cfg.trainer.d_easy, cfg.trainer.d_hard)
    write_csv(out / "tiers.csv", TIER_COLUMNS, [(t.tier, t.mean_tokens, t.accuracy, t.count) for t in table])
    if cfg.run.snapshot_buffer:
        lab.buffer.snapshot(out / "buffer_snapshot.json")


def _estimator_rows(lab: _Lab, step: int, method: str, ests: dict[int, DifficultyEstimate], truths: dict[int, float]) -> list[tuple]:
    rows = []
    for pid in sorted(ests):
        e = ests[pid]
        t = truths[pid]
        rows.append((step, pid, method, e.value, e.ess, e.k, t, abs(e.value - t)))
    return rows


def run_train(cfg: ExperimentConfig, out_dir: str | Path | None = None) -> RunReport:
    """Full difficulty-adaptive training loop with periodic held-out evaluation."""
    out = _prepare_out(cfg, out_dir)
    lab = _guard("setup", 0, _Lab, cfg)
    est_rows: list[tuple] = []

    def on_eval(step: int) -> None:
        if not lab.estimates:
            _guard("estimate", step, lab.estimate_all, step)
        truths = dict(zip(lab.world.train_ids, lab.true_difficulties(lab.world.prompts)))
        est_rows.extend(_estimator_rows(lab, step, cfg.estimator.method, lab.estimates, truths))

    _train_loop(lab, on_eval)
    curve = AccuracyCurve.from_points(lab.curve, horizon=cfg.run.n_steps)
    summary = {
        "label": cfg.label,
        "method": cfg.estimator.method,
        "kind": "train",
        "n_steps": cfg.run.n_steps,
        "curve": [[s, a] for s, a in lab.curve],
        "tokens_generated": lab.tokens_generated,
        "tier_counts": lab.tier_counts,
        "heldout_overlap": sorted(lab.seen_train_ids & {p.id for p in lab.heldout()}),
        **_curve_summary(curve),
    }
    if est_rows:
        last = max(r[0] for r in est_rows)
        final = [r for r in est_rows if r[0] == last]
        summary["final_estimator_mae"] = float(np.mean([r[-1] for r in final]))
    manifest = {}
    if out is not None:
        _write_common(lab, out, est_rows)
        write_json(out / "summary.json", summary)
        manifest = write_manifest(out)
    return RunReport(cfg.to_dict(), summary, manifest, out, curve, lab.policy, lab.world, {"lab": lab})


def run_estimator_bench(cfg: ExperimentConfig, out_dir: str | Path | None = None) -> RunReport:
    """Train one policy trajectory and score every benchmarked estimator at each evaluation."""
    methods = list(dict.fromkeys(cfg.estimator.bench_methods))
    if len(methods) < 2 and not cfg.estimator.tau_sweep:
        raise RunError("setup", 0, ValueError("estimator benchmark needs at least two methods"))
    out = _prepare_out(cfg, out_dir)
    lab = _guard("setup", 0, _Lab, cfg)
    est_rows: list[tuple] = []
    coverage: dict[str, list[float]] = {}

    def on_eval(step: int) -> None:
        prompts = lab.world.prompts
        truths = dict(zip(lab.world.train_ids, lab.true_difficulties(prompts)))
        for method in methods:
            ests = dict(zip(lab.world.train_ids, parallel_map(lambda p: lab.estimate_one(method, p.id, step), prompts)))
            est_rows.extend(_estimator_rows(lab, step, method, ests, truths))
        for tau in cfg.estimator.tau_sweep:
            name = f"snis_tau{tau:g}"
            sc = SnisConfig(clip=lab.snis_cfg.clip, tau=tau, delta=lab.snis_cfg.delta, b_min=lab.snis_cfg.b_min)
            ests = dict(zip(lab.world.train_ids, parallel_map(lambda p: lab.estimate_one("snis", p.id, step, sc), prompts)))
            est_rows.extend(_estimator_rows(lab, step, name, ests, truths))
            buffered = [e for e in ests.values() if e.k > 0]
            if buffered and step >= cfg.run.eval_every:
                coverage.setdefault(name, []).append(sum(e.source == "snis" for e in buffered) / len(buffered))

    _train_loop(lab, on_eval)
    scored = [r for r in est_rows if r[0] >= cfg.run.eval_every] or est_rows
    reports = {}
    for name in dict.fromkeys(r[2] for r in scored):
        sel = [r for r in scored if r[2] == name]
        rep = estimator_report([r[3] for r in sel], [r[6] for r in sel], name)
        reports[name] = rep
    curve = AccuracyCurve.from_points(lab.curve, horizon=cfg.run.n_steps)
    summary = {
        "label": cfg.label,
        "kind": "bench",
        "train_method": cfg.estimator.method,
        "methods": {k: v.as_dict() for k, v in reports.items()},
        "mae": {k: v.mae for k, v in reports.items()},
        "mse": {k: v.mse for k, v in reports.items()},
        "coverage": {k: float(np.mean(v)) for k, v in coverage.items()},
        "curve": [[s, a] for s, a in lab.curve],
        **_curve_summary(curve),
    }
    manifest = {}
    if out is not None:
        _write_common(lab, out, est_rows)
        write_json(out / "summary.json", summary)
        manifest = write_manifest(out)
    return RunReport(cfg.to_dict(), summary, manifest, out, curve, lab.policy, lab.world, {"reports": reports, "lab": lab})


def _pick_bound_prompt(world: World, policy: ToyPolicy, requested: int | None):
    if requested is not None:
        return world.prompt(requested)
    # the training prompt whose difficulty is closest to 0.5
    return min(world.prompts, key=lambda p: (abs(exact_difficulty(policy, p) - 0.5), p.id))


def run_bound_check(cfg: ExperimentConfig, out_dir: str | Path | None = None) -> RunReport:
    """Replicate K-rollout buffers from a drifted behaviour policy and count bound violations."""
    out = _prepare_out(cfg, out_dir)
    b = cfg.run.bound
    seed = cfg.run.seed
    world = make_world(cfg.world)
    current = initial_policy(world)
    behavior = current.copy()
    g = rngmod.stream(seed, rngmod.BOUND, 0)
    behavior.shared_logits += b.drift_scale * g.standard_normal(behavior.shared_logits.shape)
    behavior.skill_logits += b.drift_scale * g.standard_normal(behavior.skill_logits.shape)
    behavior.snapshot_id = current.snapshot_id + 1
    prompt = _pick_bound_prompt(world, current, b.prompt_id)

    cur_lp = {toks: lp for toks, lp, _ in enumerate_outcomes(current, prompt)}
    truth = 1.0 - math.fsum(math.exp(lp) for _, lp, r in enumerate_outcomes(current, prompt) if r)
    bias = clip_bias_term(current, behavior, prompt, b.clip)
    exact_mean_w = expected_clipped_weight(current, behavior, prompt, b.clip)

    sample = sample_outcomes(behavior, prompt, b.replications * b.k, rngmod.stream(seed, rngmod.BOUND, 1))
    keys = [tuple(int(t) for t in row if t >= 0) for row in sample.tokens]
    lp_cur = np.array([cur_lp[k] for k in keys])
    w = np.exp(np.clip(lp_cur - sample.logprob, -b.clip, b.clip)).reshape(b.replications, b.k)
    y = (1 - sample.rewards).reshape(b.replications, b.k)
    d_hat = (w * y).sum(axis=1) / w.sum(axis=1)
    errs = np.abs(d_hat - truth)
    b_min = b.b_min if b.b_min is not None else float(w.mean())
    snis = SnisConfig(clip=b.clip, tau=1.0, delta=b.delta, b_min=min(b_min, 1.0))
    summary = {
        "kind": "bound_check",
        "prompt_id": prompt.id,
        "true_difficulty": truth,
        "replications": b.replications,
        "k": b.k,
        "clip": b.clip,
        "delta": b.delta,
        "b_min_empirical": float(w.mean()),
        "b_min_exact": exact_mean_w,
        "b_min_used": snis.b_min,
        "clip_bias_term": bias,
        "mean_abs_error": float(errs.mean()),
        "max_abs_error": float(errs.max()),
        "live_loop_asserted": False,
    }
    try:
        br = bound_radius(snis, b.k, bias)
    except BoundInapplicableError as exc:
        summary.update(applicable=False, eps_delta=exc.eps_delta, reason=str(exc))
        violated = None
    else:
        violated = errs > br.radius
        rate = float(violated.mean())
        allowed = b.delta + 3.0 * math.sqrt(b.delta * (1 - b.delta) / b.replications)
        summary.update(
            applicable=True,
            eps_delta=br.eps_delta,
            radius=br.radius,
            violation_rate=rate,
            allowed_rate=allowed,
            passed=rate <= allowed,
        )
    manifest = {}
    if out is not None:
        rows = [
            (i, float(d_hat[i]), float(errs[i]), None if violated is None else bool(violated[i]))
            for i in range(b.replications)
        ]
        write_csv(out / "bound.csv", ("replication", "d_hat", "abs_err", "violated"), rows)
        write_json(out / "summary.json", summary)
        manifest = write_manifest(out)
    return RunReport(cfg.to_dict(), summary, manifest, out, None, current, world, {"errors": errs})
