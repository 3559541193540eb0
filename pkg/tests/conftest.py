from __future__ import annotations

import logging

import numpy as np
import pytest

from dare_lab.buffer import BufferEntry
from dare_lab.world import Rollout, ToyPolicy, WorldConfig, initial_policy, make_world

# (criterion number, passed, detail) collected by the acceptance tests
ACCEPTANCE: list[tuple[int, bool, str]] = []


@pytest.fixture(autouse=True)
def _quiet_logs():
    logging.getLogger("dare_lab").setLevel(logging.ERROR)
    yield


@pytest.fixture
def record_criterion():
    def record(number: int, passed: bool, detail: str) -> None:
        ACCEPTANCE.append((number, bool(passed), detail))
        print(f"criterion {number}: {'PASS' if passed else 'FAIL'} {detail}")

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for number, passed, detail in sorted(ACCEPTANCE):
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}")


@pytest.fixture
def small_world():
    return make_world(WorldConfig(n_prompts=12, vocab=4, t_max=4, n_reference=4, n_heldout=4, seed=3, prompt_noise=0.5))


@pytest.fixture
def small_policy(small_world):
    return initial_policy(small_world)


def random_policy(rng: np.random.Generator, vocab: int, t_max: int, n_prompts: int = 0, *, eos=None, filler=None, temperature=1.0) -> ToyPolicy:
    return ToyPolicy(
        shared_logits=rng.normal(size=(t_max, vocab)),
        skill_logits=rng.normal(size=(t_max, vocab)),
        prompt_logits=rng.normal(size=(n_prompts, t_max, vocab)) if n_prompts else None,
        temperature=temperature,
        eos_token=eos,
        filler_token=filler,
    )


def make_entry(pid: int, reward: int = 0, step: int = 0, tokens=(0,), hinted: bool = False) -> BufferEntry:
    tokens = tuple(tokens)
    return BufferEntry(
        pid,
        Rollout(
            tokens=tokens,
            length=len(tokens),
            reward=reward,
            behavior_logprobs=tuple(-0.5 for _ in tokens),
            behavior_snapshot=0,
            hinted=hinted,
            step=step,
        ),
    )
