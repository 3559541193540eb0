"""Estimator accuracy, calibration and training-efficiency metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from dare_lab.errors import DataError

N_BINS = 10
Z95 = 1.96
MIN_BIN_FOR_CI = 5


class MetricError(DataError):
    pass


@dataclass(frozen=True)
class CalibrationBin:
    lo: float
    hi: float
    mean_estimate: float | None
    mean_truth: float | None
    count: int
    ci_halfwidth: float | None


@dataclass(frozen=True)
class EstimatorReport:
    method: str
    mae: float
    mse: float
    n: int
    calibration: tuple[CalibrationBin, ...]

    def as_dict(self) -> dict:
        return {
            "method": self.method,
            "mae": self.mae,
            "mse": self.mse,
            "n": self.n,
            "calibration": [b.__dict__ for b in self.calibration],
        }


def estimator_report(estimates: Sequence[float], truths: Sequence[float], method: str = "") -> EstimatorReport:
    e = np.asarray(estimates, dtype=float)
    t = np.asarray(truths, dtype=float)
    if e.shape != t.shape:
        raise DataError(f"length mismatch: {e.shape} vs {t.shape}")
    if e.size == 0:
        raise DataError("no estimates")
    err = e - t
    bins = []
    edges = np.linspace(0.0, 1.0, N_BINS + 1)
    idx = np.minimum((np.clip(e, 0.0, 1.0) * N_BINS).astype(int), N_BINS - 1)
    for b in range(N_BINS):
        sel = idx == b
        n = int(sel.sum())
        if n == 0:
            bins.append(CalibrationBin(edges[b], edges[b + 1], None, None, 0, None))
            continue
        truth = t[sel]
        ci = None
        if n >= MIN_BIN_FOR_CI:
            ci = Z95 * float(truth.std(ddof=1)) / math.sqrt(n)
        bins.append(CalibrationBin(edges[b], edges[b + 1], float(e[sel].mean()), float(truth.mean()), n, ci))
    return EstimatorReport(method, float(np.abs(err).mean()), float(np.mean(err**2)), int(e.size), tuple(bins))


@dataclass
class AccuracyCurve:
    steps: np.ndarray
    accuracy: np.ndarray
    horizon: int | None = None

    def __post_init__(self):
        self.steps = np.asarray(self.steps, dtype=int)
        self.accuracy = np.asarray(self.accuracy, dtype=float)
        if self.steps.shape != self.accuracy.shape:
            raise DataError("steps and accuracy must align")
        if np.any(np.diff(self.steps) <= 0):
            raise DataError("steps must be strictly increasing")
        if self.horizon is None:
            self.horizon = int(self.steps[-1]) if self.steps.size else 0
        if self.steps.size and self.steps[-1] > self.horizon:
            raise DataError("steps exceed horizon")

    @classmethod
    def from_points(cls, points: Iterable[tuple[int, float]], horizon: int | None = None) -> "AccuracyCurve":
        pts = list(points)
        return cls(np.array([p[0] for p in pts]), np.array([p[1] for p in pts]), horizon)


def steps_to_target(curve: AccuracyCurve, tau: float) -> int | None:
    if curve.steps.size == 0:
        raise MetricError("empty curve")
    hit = np.nonzero((curve.accuracy >= tau) & (curve.steps <= curve.horizon))[0]
    return int(curve.steps[hit[0]]) if hit.size else None


def speedup(base: AccuracyCurve, method: AccuracyCurve, tau: float) -> float | None:
    """S_base / S_method; None when either side never reaches tau."""
    s_base = steps_to_target(base, tau)
    s_m = steps_to_target(method, tau)
    if s_base is None or s_m is None:
        return None
    if s_m == 0:
        return 1.0 if s_base == 0 else math.inf
    return s_base / s_m


def auc(curve: AccuracyCurve) -> float:
    """Trapezoidal area over [first step, horizon] divided by the span.

    The last recorded accuracy is held flat up to the horizon.
    """
    if curve.steps.size < 2:
        raise MetricError("auc needs at least two points")
    s = curve.steps.astype(float)
    a = curve.accuracy
    if curve.horizon > s[-1]:
        s = np.append(s, curve.horizon)
        a = np.append(a, a[-1])
    span = s[-1] - s[0]
    area = float(np.sum(0.5 * (a[1:] + a[:-1]) * np.diff(s)))
    return area / span


def mid_target(base: AccuracyCurve, method: AccuracyCurve) -> float:
    """Halfway between the starting accuracy and the lower of the two peaks."""
    start = float(min(base.accuracy[0], method.accuracy[0]))
    peak = float(min(base.accuracy.max(), method.accuracy.max()))
    return start + 0.5 * (peak - start)


@dataclass(frozen=True)
class TierRow:
    tier: str
    mean_tokens: float
    accuracy: float
    count: int


def difficulty_bin(d: float, d_easy: float = 0.3, d_hard: float = 0.8) -> str:
    if d < d_easy:
        return "easy"
    if d > d_hard:
        return "hard"
    return "medium"


def tier_token_report(rows: Iterable[tuple[float, int, int]], d_easy: float = 0.3, d_hard: float = 0.8) -> list[TierRow]:
    """Mean length and success rate per true-difficulty bin.

    ``rows`` are (true difficulty, generated length, reward); empty bins are
    omitted.
    """
    acc: dict[str, list[tuple[int, int]]] = {}
    for d, length, reward in rows:
        acc.setdefault(difficulty_bin(d, d_easy, d_hard), []).append((length, reward))
    if not acc:
        raise MetricError("no evaluation rollouts")
    out = []
    for tier in ("easy", "medium", "hard"):
        if tier not in acc:
            continue
        lengths, rewards = zip(*acc[tier])
        out.append(TierRow(tier, float(np.mean(lengths)), float(np.mean(rewards)), len(lengths)))
    return out
