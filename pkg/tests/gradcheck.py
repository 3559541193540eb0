"""Random small instances of the clipped objective and a central-difference check."""

from __future__ import annotations

import numpy as np

from dare_lab.trainer import TierConfig, TrainGroup, objective_and_grad
from dare_lab.world import PromptSpec, ToyPolicy, rollout

H = 1e-5


def random_instance(seed: int, beta: float, eps_minus: float, eps_plus: float):
    gen = np.random.default_rng(seed)
    v, t, n_prompts = 3, 3, 2
    policy = ToyPolicy(
        shared_logits=gen.normal(size=(t, v)),
        skill_logits=gen.normal(size=(t, v)),
        prompt_logits=0.5 * gen.normal(size=(n_prompts, t, v)),
        temperature=float(gen.uniform(0.7, 1.5)),
        eos_token=2,
    )

    def perturbed(scale):
        p = policy.copy()
        p.shared_logits += scale * gen.normal(size=p.shared_logits.shape)
        p.skill_logits += scale * gen.normal(size=p.skill_logits.shape)
        return p

    behavior = perturbed(0.4)
    ref = perturbed(0.5)
    prompts = {i: PromptSpec(i, tuple(int(x) for x in gen.integers(0, 2, size=1 + i)), np.ones(4)) for i in range(n_prompts)}
    groups = []
    for pid, prompt in prompts.items():
        rolls = [rollout(behavior, prompt, gen) for _ in range(4)]
        hint = rolls[0].__class__(prompt.target + (2,), prompt.length + 1, 1, (0.0,) * (prompt.length + 1), 0)
        rolls.append(rollout(behavior, prompt, gen, hint=hint))
        adv = gen.normal(size=len(rolls))
        groups.append(TrainGroup(pid, "medium", 0.5, rolls, np.zeros(len(rolls)), adv, eps_minus, eps_plus))
    config = TierConfig(beta_kl=beta)
    return policy, groups, config, ref, prompts


def max_relative_error(seed: int, beta: float, eps_minus: float, eps_plus: float) -> float:
    policy, groups, config, ref, prompts = random_instance(seed, beta, eps_minus, eps_plus)
    _, grad, _ = objective_and_grad(policy, groups, config, ref, prompts)
    analytic, numeric = [], []
    for name, g in (("shared_logits", grad.shared), ("skill_logits", grad.skill), ("prompt_logits", grad.prompt)):
        base = getattr(policy, name)
        for idx in np.ndindex(base.shape):
            vals = []
            for sign in (1.0, -1.0):
                p = policy.copy()
                getattr(p, name)[idx] += sign * H
                vals.append(objective_and_grad(p, groups, config, ref, prompts, with_grad=False)[0])
            numeric.append((vals[0] - vals[1]) / (2 * H))
            analytic.append(g[idx])
    analytic, numeric = np.array(analytic), np.array(numeric)
    return float(np.max(np.abs(analytic - numeric)) / max(np.max(np.abs(numeric)), 1e-8))
