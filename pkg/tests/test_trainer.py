from __future__ import annotations

import math

import numpy as np
import pytest
from gradcheck import max_relative_error
from hypothesis import given, settings
from hypothesis import strategies as st

from dare_lab.buffer import BufferEntry, ReplayBuffer
from dare_lab.errors import DataError
from dare_lab.estimators import DifficultyEstimate
from dare_lab.trainer import (
    BatchItem,
    TierConfig,
    TrainGroup,
    assign_tier,
    build_groups,
    group_advantages,
    grpo_step,
    objective_and_grad,
    shape_reward,
    tier_budget,
    token_is_clipped,
)
from dare_lab.world import WorldConfig, initial_policy, make_world, rollout, sequence_logprobs

CFG = TierConfig()


class TestTiers:
    @pytest.mark.parametrize("d,tier", [(0.2, "easy"), (0.3, "medium"), (0.8, "medium"), (0.85, "hard")])
    def test_assign(self, d, tier):
        assert assign_tier(d, CFG) == tier

    def test_budgets(self):
        assert tier_budget("easy", CFG, 6).g_q == 4
        hard = tier_budget("hard", CFG, 6)
        assert hard.g_q == 16 and hard.eps_minus == hard.eps_plus == 0.2
        med = tier_budget("medium", CFG, 6)
        assert med.g_q == 8 and med.eps_minus == med.eps_plus == 0.2
        easy = tier_budget("easy", TierConfig(t_budget_easy=3), 6)
        assert easy.length_budget == 3 and easy.eps_plus == 0.6

    def test_invalid_config(self):
        with pytest.raises(ValueError):
            TierConfig(g_easy=1).validate()
        with pytest.raises(ValueError):
            TierConfig(lambda_hard=1.0).validate()


class TestShaping:
    def test_easy_example(self):
        assert shape_reward("easy", 0.15, 1, 1, 6, CFG) == pytest.approx(1 - 8.3333e-6, abs=1e-10)

    def test_hard_example(self):
        assert shape_reward("hard", 0.9, 0, 6, 6, CFG) == pytest.approx(5.0e-5, abs=1e-15)

    @pytest.mark.parametrize("r", [0, 1])
    def test_medium_unchanged(self, r):
        assert shape_reward("medium", 0.5, r, 3, 6, CFG) == r

    def test_other_branches_unchanged(self):
        assert shape_reward("easy", 0.1, 0, 5, 6, CFG) == 0.0
        assert shape_reward("hard", 0.95, 1, 5, 6, CFG) == 1.0

    def test_easy_penalty_strictly_decreasing_in_length(self):
        vals = [shape_reward("easy", 0.05, 1, n, 6, CFG) for n in range(1, 7)]
        assert all(a > b for a, b in zip(vals, vals[1:]))

    @settings(max_examples=200, deadline=None)
    @given(st.floats(0.8001, 1.0), st.floats(0.0, 0.999), st.lists(st.integers(1, 12), min_size=2, max_size=16))
    def test_hard_ordering(self, d, lam, lengths):
        cfg = TierConfig(lambda_hard=lam)
        tmax = max(lengths)
        correct = [shape_reward("hard", d, 1, n, tmax, cfg) for n in lengths]
        wrong = [shape_reward("hard", d, 0, n, tmax, cfg) for n in lengths]
        assert min(correct) > max(wrong)


class TestAdvantages:
    def test_examples(self):
        assert np.allclose(group_advantages([1, 1, 0, 0]), [1, 1, -1, -1])
        assert group_advantages([0.3] * 5).tolist() == [0.0] * 5
        assert np.allclose(group_advantages([1, 0, 0, 0]), [1.7321, -0.5774, -0.5774, -0.5774], atol=1e-4)

    def test_too_small(self):
        with pytest.raises(DataError):
            group_advantages([1.0])

    def test_floor_caps_amplification(self):
        a = group_advantages([1.0, 1.0 - 1e-9])
        assert np.allclose(a, [5e-4, -5e-4])

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.floats(-5, 5), min_size=2, max_size=16))
    def test_standardised(self, r):
        a = group_advantages(r)
        assert abs(a.mean()) < 1e-9
        if np.std(r) >= 1e-6:
            assert abs(a.std() - 1) < 1e-6


class TestClipping:
    def test_asymmetry(self):
        ratio = 1 + 0.6 - 1e-6
        assert not token_is_clipped(ratio, 1.0, 0.2, 0.6)
        assert token_is_clipped(ratio, 1.0, 0.2, 0.2)

    def test_negative_advantage_uses_lower_bound(self):
        assert token_is_clipped(0.7, -1.0, 0.2, 0.6)
        assert not token_is_clipped(1.5, -1.0, 0.2, 0.2)


@pytest.fixture
def world():
    return make_world(WorldConfig(n_prompts=16, vocab=5, t_max=5, n_reference=4, n_heldout=0, seed=1, prompt_noise=0.3))


def _item(world, pid, d, source="snis"):
    return BatchItem(world.prompt(pid), DifficultyEstimate(d, source))


class TestBuildGroups:
    def test_fully_on_policy(self, world):
        pol = initial_policy(world)
        buf = ReplayBuffer(world.train_ids)
        gen = np.random.default_rng(0)
        for pid in (0, 1):
            for _ in range(8):
                buf.push(BufferEntry(pid, rollout(pol, world.prompt(pid), gen)))
        groups = build_groups([_item(world, 0, 0.5), _item(world, 1, 0.1)], buf, pol, TierConfig(sigma=1.0), 0, 1)
        assert all(g.n_replay == 0 for g in groups)

    def test_replay_mix(self, world):
        pol = initial_policy(world)
        buf = ReplayBuffer(world.train_ids)
        gen = np.random.default_rng(0)
        old = [rollout(pol, world.prompt(3), gen) for _ in range(8)]
        for r in old:
            buf.push(BufferEntry(3, r))
        (g,) = build_groups([_item(world, 3, 0.5)], buf, pol, TierConfig(sigma=0.5), 0, 1, push=False)
        assert g.n_replay == 4 and len(g.rollouts) == 8
        assert g.rollouts[:4] == old[::-1][:4]
        assert len(g.fresh) == 4

    def test_short_buffer_topped_up_with_fresh(self, world):
        pol = initial_policy(world)
        buf = ReplayBuffer(world.train_ids)
        buf.push(BufferEntry(2, rollout(pol, world.prompt(2), np.random.default_rng(0))))
        (g,) = build_groups([_item(world, 2, 0.5)], buf, pol, TierConfig(sigma=0.5), 0, 1, push=False)
        assert g.n_replay == 1 and len(g.rollouts) == 8 and len(g.fresh) == 7

    def test_hard_without_success_gets_no_hints(self, world):
        pol = initial_policy(world)
        buf = ReplayBuffer(world.train_ids)
        (g,) = build_groups([_item(world, 4, 0.95)], buf, pol, CFG, 0, 1)
        assert g.tier == "hard" and len(g.rollouts) == 16 and g.n_hinted == 0
        assert buf.count(4) == 8  # k_cap keeps the newest 8 of 16 pushes

    def test_hard_with_success_gets_hints(self, world):
        pol = initial_policy(world)
        p = world.prompt(5)
        buf = ReplayBuffer(world.train_ids)
        buf.push(BufferEntry(5, type(rollout(pol, p, np.random.default_rng(0)))(p.target + (4,), p.length + 1, 1, (0.0,) * (p.length + 1), 0)))
        (g,) = build_groups([_item(world, 5, 0.95)], buf, pol, TierConfig(sigma=1.0), 0, 1)
        assert g.n_hinted == 8 and len(g.rollouts) == 16
        assert all(r.n_forced == math.ceil(p.length / 2) for r in g.rollouts if r.hinted)

    def test_easy_budget(self, world):
        pol = initial_policy(world)
        buf = ReplayBuffer(world.train_ids)
        (g,) = build_groups([_item(world, 6, 0.1)], buf, pol, TierConfig(t_budget_easy=2), 0, 1)
        assert g.tier == "easy" and len(g.rollouts) == 4
        assert all(r.length <= 2 for r in g.rollouts)
        assert g.eps_plus == 0.6

    def test_non_adaptive_is_medium(self, world):
        pol = initial_policy(world)
        (g,) = build_groups([_item(world, 7, 0.95)], ReplayBuffer(world.train_ids), pol, TierConfig(adaptive=False), 0, 1)
        assert g.tier == "medium" and len(g.rollouts) == 8


def _single(world, pol, pid, adv, seed=0):
    r = rollout(pol, world.prompt(pid), np.random.default_rng(seed))
    return TrainGroup(pid, "medium", 0.5, [r], np.zeros(1), np.array([adv], dtype=float), 0.2, 0.2), r


class TestUpdate:
    def test_zero_advantages_no_change(self, world):
        pol = initial_policy(world)
        g, _ = _single(world, pol, 0, 0.0)
        new, stats = grpo_step(pol, [g], CFG, None, {p.id: p for p in world.prompts})
        assert np.array_equal(new.shared_logits, pol.shared_logits)
        assert np.array_equal(new.skill_logits, pol.skill_logits)
        assert stats.grad_norm == 0.0 and new.snapshot_id == pol.snapshot_id + 1

    def test_positive_advantage_raises_logprob(self, world):
        pol = initial_policy(world)
        p = world.prompt(1)
        g, r = _single(world, pol, 1, 1.0, seed=3)
        new, stats = grpo_step(pol, [g], CFG, None, {p.id: p})
        assert sequence_logprobs(new, p, r.tokens).sum() > sequence_logprobs(pol, p, r.tokens).sum()
        assert stats.mean_ratio == pytest.approx(1.0) and stats.clip_frac == 0.0

    def test_kl_zero_at_reference(self, world):
        pol = initial_policy(world)
        g, _ = _single(world, pol, 2, 0.0)
        cfg = TierConfig(beta_kl=0.5)
        prompts = {p.id: p for p in world.prompts}
        new, stats = grpo_step(pol, [g], cfg, pol.copy(), prompts)
        assert stats.kl == 0.0 and stats.grad_norm == 0.0
        _, _, after = objective_and_grad(new, [g], cfg, pol, prompts, with_grad=False)
        assert after.kl == 0.0

    def test_kl_needs_reference(self, world):
        pol = initial_policy(world)
        g, _ = _single(world, pol, 2, 1.0)
        with pytest.raises(DataError):
            objective_and_grad(pol, [g], TierConfig(beta_kl=0.1), None, {2: world.prompt(2)})

    @pytest.mark.parametrize("seed,beta,eps", [(0, 0.0, (0.2, 0.2)), (1, 0.3, (0.2, 0.6)), (2, 0.3, (0.1, 0.1))])
    def test_gradient_matches_finite_differences(self, seed, beta, eps):
        assert max_relative_error(seed, beta, *eps) <= 1e-4
