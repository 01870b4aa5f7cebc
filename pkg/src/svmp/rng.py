"""Seeded random streams.

Every consumer derives its own PCG64 stream from ``(seed, purpose)`` through
``SeedSequence`` spawn keys, so data generation, initialization and the
update loop of one run never share draws.
"""

from __future__ import annotations

from enum import IntEnum

import numpy as np


class Stream(IntEnum):
    DATA = 0
    INIT = 1
    UPDATES = 2
    DIAGNOSTICS = 3


def stream(seed, purpose: Stream) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    ss = np.random.SeedSequence(int(seed), spawn_key=(int(purpose),))
    return np.random.Generator(np.random.PCG64(ss))
