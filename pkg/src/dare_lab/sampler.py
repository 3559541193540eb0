"""Difficulty-guided batch selection."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from dare_lab.errors import SelectionError

log = logging.getLogger(__name__)

MODES = ("beta", "entropy_softmax", "uniform")


def beta_weight(d_hat: float, kappa: float) -> float:
    """Unnormalised symmetric Beta(1 + kappa/2, 1 + kappa/2) density at ``d_hat``.

    Evaluated in log space as (kappa/2) * (log d + log(1 - d)); the sum is
    symmetric in d and 1 - d whenever 1 - d is exact.
    """
    if kappa == 0:
        return 1.0
    if d_hat <= 0.0 or d_hat >= 1.0:
        return 0.0
    return math.exp(0.5 * kappa * (math.log(d_hat) + math.log(1.0 - d_hat)))


@dataclass
class SamplingWeights:
    prompt_ids: np.ndarray
    weights: np.ndarray
    mode: str

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown sampler mode {self.mode!r}")
        self.prompt_ids = np.asarray(self.prompt_ids, dtype=int)
        self.weights = np.asarray(self.weights, dtype=float)
        if np.any(self.weights < 0) or not np.all(np.isfinite(self.weights)):
            raise ValueError("weights must be finite and non-negative")


def compute_weights(
    scores: Mapping[int, float],
    mode: str = "beta",
    *,
    kappa: float = 100.0,
    tau_ent: float = 1.0,
) -> SamplingWeights:
    """Per-prompt selection weights in ascending prompt-id order.

    ``scores`` are difficulty estimates for ``beta`` mode and raw entropy
    scores for ``entropy_softmax`` mode.
    """
    ids = np.array(sorted(scores), dtype=int)
    vals = np.array([scores[i] for i in ids], dtype=float)
    if mode == "beta":
        # log-space then shift by the max so kappa=100 cannot underflow to all-zero
        with np.errstate(divide="ignore"):
            logw = 0.5 * kappa * (np.log(vals) + np.log(1.0 - vals)) if kappa > 0 else np.zeros_like(vals)
        finite = np.isfinite(logw)
        w = np.zeros_like(vals)
        if finite.any():
            w[finite] = np.exp(logw[finite] - logw[finite].max())
    elif mode == "entropy_softmax":
        s = vals / tau_ent
        w = np.exp(s - s.max())
    else:
        w = np.ones_like(vals)
    return SamplingWeights(ids, w, mode)


def sample_batch(weights: SamplingWeights, batch_size: int, rng: np.random.Generator) -> list[int]:
    """Weighted sampling without replacement by sequential renormalised draws."""
    w = weights.weights.copy()
    ids = weights.prompt_ids
    positive = int(np.count_nonzero(w > 0))
    if positive == 0:
        raise SelectionError("all sampling weights are zero")
    if batch_size > positive:
        log.warning("batch of %d requested but only %d prompts have positive weight", batch_size, positive)
    out: list[int] = []
    for _ in range(min(batch_size, positive)):
        total = w.sum()
        u = rng.random() * total
        idx = int(np.searchsorted(np.cumsum(w), u, side="right"))
        idx = min(idx, len(w) - 1)
        while w[idx] == 0:  # guard against landing on a zero-width bin via rounding
            idx -= 1
        out.append(int(ids[idx]))
        w[idx] = 0.0
    return out


def first_draw_probabilities(weights: Sequence[float]) -> np.ndarray:
    w = np.asarray(weights, dtype=float)
    return w / w.sum()
