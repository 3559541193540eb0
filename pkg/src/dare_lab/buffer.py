"""Prompt-keyed FIFO replay buffer."""

from __future__ import annotations

import itertools
import json
from collections import deque
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

from dare_lab.errors import DataError, IntegrityError
from dare_lab.world import Rollout

SNAPSHOT_VERSION = 1


@dataclass(frozen=True)
class BufferEntry:
    prompt_id: int
    rollout: Rollout


class ReplayBuffer:
    """FIFO store of rollouts, one queue per prompt.

    Each queue holds at most ``k_cap`` entries. When the total exceeds
    ``capacity`` the oldest entry of the prompt whose most recent push is the
    oldest is dropped.
    """

    def __init__(self, prompt_ids: Iterable[int], k_cap: int = 8, capacity: int = 4096):
        if k_cap < 1 or capacity < 1:
            raise ValueError("k_cap and capacity must be positive")
        self.k_cap = int(k_cap)
        self.capacity = int(capacity)
        self._known = frozenset(int(p) for p in prompt_ids)
        self._queues: dict[int, deque[BufferEntry]] = {}
        self._last_push: dict[int, int] = {}
        self._clock = itertools.count()
        self.size = 0

    @property
    def prompt_ids(self) -> frozenset[int]:
        return self._known

    def push(self, entry: BufferEntry) -> None:
        pid = entry.prompt_id
        if pid not in self._known:
            raise DataError(f"unknown prompt_id {pid}")
        q = self._queues.setdefault(pid, deque())
        if q and entry.rollout.step < q[-1].rollout.step:
            raise DataError(f"prompt {pid}: step {entry.rollout.step} older than queue tail")
        q.append(entry)
        self._last_push[pid] = next(self._clock)
        self.size += 1
        if len(q) > self.k_cap:
            q.popleft()
            self.size -= 1
        while self.size > self.capacity:
            self._evict_global()

    def _evict_global(self) -> None:
        victim = min((p for p, q in self._queues.items() if q), key=self._last_push.__getitem__)
        self._queues[victim].popleft()
        self.size -= 1
        if not self._queues[victim]:
            del self._queues[victim]
            del self._last_push[victim]

    def entries(self, prompt_id: int) -> tuple[BufferEntry, ...]:
        q = self._queues.get(prompt_id)
        return tuple(q) if q else ()

    def count(self, prompt_id: int) -> int:
        q = self._queues.get(prompt_id)
        return len(q) if q else 0

    def sizes(self) -> dict[int, int]:
        return {p: len(q) for p, q in sorted(self._queues.items()) if q}

    def select_hint(self, prompt_id: int) -> Rollout | None:
        """Most recent successful rollout for the prompt, if any."""
        for e in reversed(self.entries(prompt_id)):
            if e.rollout.reward == 1:
                return e.rollout
        return None

    def __eq__(self, other) -> bool:
        if not isinstance(other, ReplayBuffer):
            return NotImplemented
        return (
            self.k_cap == other.k_cap
            and self.capacity == other.capacity
            and self.size == other.size
            and self._lru_order() == other._lru_order()
            and all(self.entries(p) == other.entries(p) for p in self._queues)
        )

    def _lru_order(self) -> list[int]:
        return sorted((p for p, q in self._queues.items() if q), key=self._last_push.__getitem__)

    # -- persistence ---------------------------------------------------------

    def to_json(self) -> dict:
        prompts = []
        for pid in self._lru_order():
            prompts.append(
                {
                    "prompt_id": pid,
                    "entries": [_rollout_to_json(e.rollout) for e in self._queues[pid]],
                }
            )
        return {
            "version": SNAPSHOT_VERSION,
            "k_cap": self.k_cap,
            "c": self.capacity,
            "known_prompt_ids": sorted(self._known),
            "prompts": prompts,
        }

    def snapshot(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), separators=(",", ":")) + "\n")

    @classmethod
    def restore(cls, path: str | Path) -> "ReplayBuffer":
        raw = Path(path).read_bytes()
        text = raw.decode("utf-8", errors="replace")
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            offset = len(text[: exc.pos].encode("utf-8"))
            raise IntegrityError(f"corrupt buffer snapshot: {exc.msg}", offset) from None
        try:
            return cls.from_json(doc)
        except (KeyError, TypeError, ValueError, DataError) as exc:
            raise IntegrityError(f"malformed buffer snapshot: {exc!r}", len(raw)) from None

    @classmethod
    def from_json(cls, doc: dict) -> "ReplayBuffer":
        if doc["version"] != SNAPSHOT_VERSION:
            raise ValueError(f"unsupported snapshot version {doc['version']}")
        known = doc.get("known_prompt_ids") or [p["prompt_id"] for p in doc["prompts"]]
        buf = cls(known, k_cap=doc["k_cap"], capacity=doc["c"])
        for block in doc["prompts"]:
            pid = int(block["prompt_id"])
            entries = [BufferEntry(pid, _rollout_from_json(e)) for e in block["entries"]]
            if len(entries) > buf.k_cap:
                raise ValueError(f"prompt {pid} holds more than k_cap entries")
            if pid not in buf._known:
                raise DataError(f"unknown prompt_id {pid}")
            if entries:
                buf._queues[pid] = deque(entries)
                buf._last_push[pid] = next(buf._clock)
                buf.size += len(entries)
        if buf.size > buf.capacity:
            raise ValueError("snapshot exceeds global capacity")
        return buf


def _rollout_to_json(r: Rollout) -> dict:
    return {
        "tokens": list(r.tokens),
        "length": r.length,
        "reward": r.reward,
        "behavior_logprobs": list(r.behavior_logprobs),
        "behavior_snapshot": r.behavior_snapshot,
        "hinted": r.hinted,
        "step": r.step,
        "n_forced": r.n_forced,
    }


def _rollout_from_json(d: dict) -> Rollout:
    r = Rollout(
        tokens=tuple(int(t) for t in d["tokens"]),
        length=int(d["length"]),
        reward=int(d["reward"]),
        behavior_logprobs=tuple(float(x) for x in d["behavior_logprobs"]),
        behavior_snapshot=int(d["behavior_snapshot"]),
        hinted=bool(d["hinted"]),
        step=int(d["step"]),
        n_forced=int(d.get("n_forced", 0)),
    )
    if r.length != len(r.tokens) or r.length != len(r.behavior_logprobs):
        raise ValueError("rollout length mismatch")
    if r.reward not in (0, 1):
        raise ValueError("reward must be 0 or 1")
    return r
