"""Deterministic RNG streams keyed by integer tuples.

Every random draw in the package goes through `make_rng` so identical
(seed, purpose, index) keys give identical streams on any platform.
"""

from __future__ import annotations

import numpy as np

_U64 = (1 << 64) - 1

# purpose tags; keep stable, they are part of the determinism contract
TAG_INIT = 1
TAG_MASK = 2
TAG_SHUFFLE = 3
TAG_BACKGROUND = 4
TAG_SEGMENT = 5
TAG_GRADCHECK = 6
TAG_PROBE = 7


def make_rng(*keys: int) -> np.random.Generator:
    entropy = [int(k) & _U64 for k in keys]
    return np.random.default_rng(np.random.SeedSequence(entropy))
