"""Counter-based random streams.

Every random draw in the lab comes from a generator keyed by the run seed plus
a tuple of integers (purpose, step, prompt id, rollout index, ...). Streams are
independent of the order in which they are requested, so parallel rollout
generation cannot change results.
"""

from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1

# purpose tags
WORLD = 1
REFERENCE = 2
ROLLOUT = 3
SAMPLER = 4
ESTIMATE = 5
DRIFT = 6
EVAL = 7
BENCH = 8
BOUND = 9
INIT = 10


def stream(seed: int, *keys: int) -> np.random.Generator:
    entropy = [int(seed) & _MASK64] + [int(k) & _MASK64 for k in keys]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))
