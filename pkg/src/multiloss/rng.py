"""Named random substreams derived from one root seed.

Every consumer of randomness asks for ``substream(seed, name, *keys)`` instead
of sharing a generator, so two strategies configured with the same seed see the
same data order even if one of them draws extra dropout masks.
"""

from __future__ import annotations

import numpy as np

STREAMS = {
    "init": 1,
    "shuffle": 2,
    "dropout": 3,
    "noise": 4,
    "data": 5,
    "subsample": 6,
    "inference": 7,
}


def substream(seed: int, name: str, *keys: int) -> np.random.Generator:
    if name not in STREAMS:
        raise KeyError(f"unknown rng stream {name!r}")
    if seed < 0:
        raise ValueError(f"seed must be non-negative, got {seed}")
    return np.random.default_rng(np.random.SeedSequence([int(seed), STREAMS[name], *map(int, keys)]))
