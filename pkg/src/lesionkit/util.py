"""Small shared helpers: seeded substreams and rounding."""

from __future__ import annotations

import hashlib

import numpy as np


def subseed(seed: int, name: str) -> int:
    """Stable named substream seed derived from a master seed.

    Uses sha256 so the mapping is identical across platforms and runs.
    """
    digest = hashlib.sha256(f"{int(seed)}:{name}".encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1


def substream(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng(subseed(seed, name))


def nearest_odd(x: float) -> int:
    """Nearest odd integer (ties resolved by Python banker's rounding of
    the half-step, so 8 -> 9 and 6 -> 5)."""
    return 2 * round((float(x) - 1.0) / 2.0) + 1
