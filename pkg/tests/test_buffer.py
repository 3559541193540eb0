from __future__ import annotations

import json

import pytest
from conftest import make_entry
from hypothesis import given, settings
from hypothesis import strategies as st

from dare_lab.buffer import ReplayBuffer
from dare_lab.errors import DataError, IntegrityError


def test_per_prompt_fifo():
    buf = ReplayBuffer([0], k_cap=2)
    e1, e2, e3 = (make_entry(0, step=s) for s in (1, 2, 3))
    for e in (e1, e2, e3):
        buf.push(e)
    assert buf.entries(0) == (e2, e3)


def test_global_cap_evicts_least_recently_pushed_prompt():
    buf = ReplayBuffer([0, 1], k_cap=2, capacity=2)
    buf.push(make_entry(0, step=0, tokens=(1,)))
    buf.push(make_entry(0, step=1, tokens=(2,)))
    buf.push(make_entry(1, step=1))
    assert buf.sizes() == {0: 1, 1: 1}
    assert buf.entries(0)[0].rollout.tokens == (2,)


def test_round_trip_bit_identical():
    buf = ReplayBuffer([4])
    e = make_entry(4, reward=1, step=2, tokens=(3, 1, 0))
    buf.push(e)
    got = buf.entries(4)[0]
    assert got == e and got.rollout.behavior_logprobs == e.rollout.behavior_logprobs


def test_unknown_prompt_rejected_on_push_and_empty_on_read():
    buf = ReplayBuffer([0, 1])
    with pytest.raises(DataError):
        buf.push(make_entry(9))
    assert buf.entries(9) == ()
    assert buf.entries(0) == ()


def test_push_order_preserved():
    buf = ReplayBuffer([0], k_cap=5)
    entries = [make_entry(0, step=s) for s in range(3)]
    for e in entries:
        buf.push(e)
    assert list(buf.entries(0)) == entries
    assert buf.entries(0) == buf.entries(0)


def test_older_step_rejected():
    buf = ReplayBuffer([0])
    buf.push(make_entry(0, step=5))
    with pytest.raises(DataError):
        buf.push(make_entry(0, step=4))


@pytest.mark.parametrize(
    "rewards,expected",
    [((0, 0), None), ((1, 0, 1), 2), ((), None)],
)
def test_select_hint(rewards, expected):
    buf = ReplayBuffer([0])
    for i, r in enumerate(rewards):
        buf.push(make_entry(0, reward=r, step=i))
    hint = buf.select_hint(0)
    assert (hint is None) if expected is None else (hint.step == expected)


def test_snapshot_restore(tmp_path):
    buf = ReplayBuffer([0, 1, 2], k_cap=3, capacity=5)
    for s in range(4):
        buf.push(make_entry(s % 2, reward=s % 2, step=s, tokens=(s, 1)))
    buf.push(make_entry(2, step=9, hinted=True))
    path = tmp_path / "buf.json"
    buf.snapshot(path)
    back = ReplayBuffer.restore(path)
    assert back == buf
    # eviction order survives the round trip
    for b in (buf, back):
        b.push(make_entry(1, step=20))
        b.push(make_entry(1, step=21))
    assert back == buf


def test_empty_snapshot(tmp_path):
    buf = ReplayBuffer([0, 1])
    buf.snapshot(tmp_path / "e.json")
    back = ReplayBuffer.restore(tmp_path / "e.json")
    assert back == buf and back.size == 0 and back.prompt_ids == buf.prompt_ids


def test_truncated_snapshot_reports_offset(tmp_path):
    buf = ReplayBuffer([0])
    buf.push(make_entry(0, tokens=(1, 2, 3)))
    path = tmp_path / "b.json"
    buf.snapshot(path)
    raw = path.read_bytes()
    path.write_bytes(raw[: len(raw) // 2])
    with pytest.raises(IntegrityError) as exc:
        ReplayBuffer.restore(path)
    assert 0 <= exc.value.offset <= len(raw) // 2


def test_malformed_snapshot(tmp_path):
    path = tmp_path / "m.json"
    path.write_text(json.dumps({"version": 1, "k_cap": 1, "c": 4, "prompts": [{"prompt_id": 0, "entries": [{"tokens": [1]}]}]}))
    with pytest.raises(IntegrityError):
        ReplayBuffer.restore(path)


@settings(max_examples=60, deadline=None)
@given(
    st.lists(st.integers(0, 4), min_size=0, max_size=60),
    st.integers(1, 4),
    st.integers(1, 12),
)
def test_capacity_invariants(pushes, k_cap, capacity):
    buf = ReplayBuffer(range(5), k_cap=k_cap, capacity=capacity)
    for step, pid in enumerate(pushes):
        buf.push(make_entry(pid, step=step))
        assert buf.size <= capacity
        assert all(n <= k_cap for n in buf.sizes().values())
        assert buf.size == sum(buf.sizes().values())
    # the newest push is never evicted
    if pushes:
        assert buf.entries(pushes[-1])[-1].rollout.step == len(pushes) - 1
