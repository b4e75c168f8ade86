"""Hierarchical seed derivation: every stochastic choice keys off one root seed."""

from __future__ import annotations

import zlib

import numpy as np


def _key(k) -> int:
    if isinstance(k, (int, np.integer)):
        if k < 0:
            raise ValueError(f"seed components must be nonnegative, got {k}")
        return int(k)
    return zlib.crc32(str(k).encode("utf-8"))


def derive_rng(seed: int, *keys) -> np.random.Generator:
    """Generator for the sub-stream ``seed/keys[0]/keys[1]/...``.

    Streams with different key paths are statistically independent, and a
    stream never depends on which other streams were drawn first.
    """
    return np.random.default_rng([_key(seed), *(_key(k) for k in keys)])
