"""Counter-based random streams keyed by integers.

Every random draw in the package comes from ``keyed_rng(seed, tag, ...)`` so
results depend only on the keys, never on call order or scheduling.
"""
from __future__ import annotations

import zlib

import numpy as np


def tag(name: str) -> int:
    """Stable integer for a purpose label."""
    return zlib.crc32(name.encode("utf-8"))


def keyed_rng(seed: int, purpose: str, *keys: int) -> np.random.Generator:
    """Independent Philox generator for ``(seed, purpose, *keys)``."""
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF, tag(purpose), *(int(k) for k in keys)]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))
