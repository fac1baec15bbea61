"""Keyed counter-based RNG streams (portable across platforms and ordering)."""

from __future__ import annotations

import numpy as np


def keyed_rng(*key: int) -> np.random.Generator:
    """Philox generator keyed by up to two non-negative 64-bit integers.

    Streams are independent per key, so per-sample or per-epoch consumers can
    run in any order without changing what each one draws.
    """
    if len(key) > 2:
        raise ValueError("Philox keys take at most two words")
    words = np.zeros(2, dtype=np.uint64)
    for i, k in enumerate(key):
        words[i] = np.uint64(int(k))
    return np.random.Generator(np.random.Philox(key=words))
