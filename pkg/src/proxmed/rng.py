"""Counter-based random streams keyed by integer tuples."""

from __future__ import annotations

import numpy as np


def stream(seed: int, *key: int) -> np.random.Generator:
    """Philox generator for the stream ``(seed, *key)``; independent of call order."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed) & (2**64 - 1), *map(int, key)])))
