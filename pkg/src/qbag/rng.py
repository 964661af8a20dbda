"""Named, stateless random substreams derived from one experiment seed.

Every random decision is keyed by ``(seed, stream, *keys)`` (e.g. the round
number), so no generator state needs to be carried between rounds and a resumed
run draws exactly what an uninterrupted one would.
"""

from __future__ import annotations

import numpy as np

STREAMS = {
    "test": 1,
    "init": 2,
    "bootstrap": 3,
    "training": 4,
    "noise": 5,
    "random_batch": 6,
    "cv": 7,
    "audit": 8,
}


def _entropy(seed: int, name: str, keys) -> list[int]:
    if seed < 0:
        raise ValueError("seeds must be non-negative")
    return [int(seed), STREAMS[name], *(int(k) for k in keys)]


def substream(seed: int, name: str, *keys: int) -> np.random.Generator:
    return np.random.default_rng(_entropy(seed, name, keys))


def substream_seed(seed: int, name: str, *keys: int) -> int:
    """A 31-bit integer seed for APIs that take plain ints."""
    state = np.random.SeedSequence(_entropy(seed, name, keys)).generate_state(1, np.uint32)[0]
    return int(state) >> 1
