"""Deterministic sub-seed derivation: child streams keyed by (seed, tags...)."""
from __future__ import annotations

import zlib

import numpy as np


def _tag(t) -> int:
    if isinstance(t, (int, np.integer)):
        if t < 0:
            raise ValueError(f"seed tags must be non-negative, got {t}")
        return int(t)
    return zlib.crc32(str(t).encode("utf-8"))


def derive_seed(seed: int, *tags) -> int:
    """63-bit child seed, a pure function of ``seed`` and ``tags``."""
    ss = np.random.SeedSequence([_tag(seed), *(_tag(t) for t in tags)])
    hi, lo = ss.generate_state(2, dtype=np.uint32)
    return ((int(hi) << 32) | int(lo)) & 0x7FFF_FFFF_FFFF_FFFF


def rng(seed: int, *tags) -> np.random.Generator:
    return np.random.default_rng(derive_seed(seed, *tags))
