from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dare_lab.errors import SelectionError
from dare_lab.sampler import SamplingWeights, beta_weight, compute_weights, first_draw_probabilities, sample_batch


def _w(values, mode="beta"):
    return SamplingWeights(np.arange(len(values)), np.asarray(values, dtype=float), mode)


def test_kappa_zero_uniform():
    assert all(beta_weight(d, 0) == 1.0 for d in (0.0, 0.01, 0.5, 0.99, 1.0))
    sw = compute_weights({i: d for i, d in enumerate((0.0, 0.2, 0.5, 1.0))}, kappa=0)
    assert sw.weights.tolist() == [1.0] * 4


def test_beta_weight_peak_and_zeros():
    assert beta_weight(0.0, 100) == 0.0 and beta_weight(1.0, 100) == 0.0
    assert beta_weight(0.5, 4) > beta_weight(0.3, 4) > beta_weight(0.1, 4)


def test_beta_weight_symmetry_exact_on_dyadics():
    for k in range(1, 64):
        d = k / 64
        for kappa in (0.5, 10.0, 100.0):
            assert beta_weight(d, kappa) == beta_weight(1 - d, kappa)


@settings(max_examples=200, deadline=None)
@given(st.floats(1e-9, 0.5), st.floats(0.0, 200.0))
def test_beta_weight_symmetry(d, kappa):
    # x >= 0.5 so 1 - x is exact and (x, y) is an exact complementary pair
    x = 1.0 - d
    y = 1.0 - x
    assert 1.0 - y == x
    assert beta_weight(x, kappa) == beta_weight(y, kappa)


def test_kappa_100_does_not_underflow():
    sw = compute_weights({0: 1e-3, 1: 0.999, 2: 0.002}, kappa=100)
    assert sw.weights.max() == 1.0 and np.count_nonzero(sw.weights) == 3


def test_compute_weights_modes():
    scores = {3: 0.2, 1: 1.5, 2: 0.7}
    ent = compute_weights(scores, "entropy_softmax", tau_ent=0.5)
    assert ent.prompt_ids.tolist() == [1, 2, 3]
    expected = np.exp(np.array([1.5, 0.7, 0.2]) / 0.5)
    assert np.allclose(ent.weights / ent.weights.sum(), expected / expected.sum())
    assert compute_weights(scores, "uniform").weights.tolist() == [1.0] * 3
    with pytest.raises(ValueError):
        compute_weights(scores, "bogus")


def test_equal_weights_full_batch_is_permutation():
    out = sample_batch(_w([1.0] * 7), 7, np.random.default_rng(0))
    assert sorted(out) == list(range(7))


def test_single_positive_weight():
    assert sample_batch(_w([0, 0, 2.5, 0]), 1, np.random.default_rng(1)) == [2]


def test_all_zero_weights():
    with pytest.raises(SelectionError):
        sample_batch(_w([0.0, 0.0]), 1, np.random.default_rng(0))


def test_shortfall_returns_positive_prompts_only():
    out = sample_batch(_w([0, 1, 0, 3]), 4, np.random.default_rng(0))
    assert sorted(out) == [1, 3]


def test_no_duplicates():
    gen = np.random.default_rng(5)
    for _ in range(200):
        w = gen.random(10) * (gen.random(10) > 0.2)
        if not w.any():
            continue
        out = sample_batch(_w(w), 6, gen)
        assert len(out) == len(set(out)) == min(6, np.count_nonzero(w))
        assert all(w[i] > 0 for i in out)


def test_first_draw_probabilities():
    assert np.allclose(first_draw_probabilities([2, 1, 1]), [0.5, 0.25, 0.25])
