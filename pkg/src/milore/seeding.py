"""Named random streams fanned out from one top-level seed."""

from __future__ import annotations

import zlib

import numpy as np


def stream_seed(seed: int, name: str, *extra: int) -> int:
    """Stable 63-bit seed for the stream ``name`` (e.g. "data", "mask", "kmeans", "init")."""
    ss = np.random.SeedSequence([int(seed), zlib.crc32(name.encode("utf-8")), *map(int, extra)])
    return int(ss.generate_state(1, dtype=np.uint64)[0]) & ((1 << 63) - 1)


def stream_rng(seed: int, name: str, *extra: int) -> np.random.Generator:
    return np.random.default_rng(stream_seed(seed, name, *extra))
