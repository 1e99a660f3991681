"""Seeded randomness.

Every stochastic component draws from ``numpy.random.Generator`` on top of
PCG64 (128-bit state, 64-bit output), seeded with a non-negative integer.
Child streams for replicates and restarts come from ``SeedSequence.spawn``
so they do not depend on scheduling order.
"""

from __future__ import annotations

import numpy as np


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed))))


def child_seeds(seed: int, n: int) -> list[int]:
    """``n`` independent 64-bit seeds derived from ``seed``."""
    children = np.random.SeedSequence(int(seed)).spawn(n)
    return [int(c.generate_state(1, dtype=np.uint64)[0]) for c in children]
