"""Seed derivation for reproducible, disjoint random streams.

Every stochastic step in the package (training init, operator application,
batch generation) is keyed by an explicit integer seed derived from a base
seed plus structural indices, so whole runs replay bit-identically.
"""

from __future__ import annotations

import numpy as np


def derive_seed(*parts: int) -> int:
    """Mix integer parts into a single 63-bit seed.

    Built on numpy's SeedSequence, which is platform-independent and gives
    well-separated streams for distinct part tuples.
    """
    if not parts:
        raise ValueError("derive_seed needs at least one part")
    seq = np.random.SeedSequence([int(p) & 0xFFFFFFFFFFFFFFFF for p in parts])
    return int(seq.generate_state(1, np.uint64)[0] >> 1)


def make_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(int(seed))
