"""Deterministic seed derivation.

Every source of randomness in the repo (init, data order, dropout masks,
noise injection, shuffling) draws from a generator derived here, so a run
is a pure function of its root seed and its counters. ``hash()`` is
intentionally avoided: it is salted per process.
"""

from __future__ import annotations

import hashlib

import numpy as np

_MASK63 = (1 << 63) - 1


def derive_seed(*parts: object) -> int:
    """Stable 63-bit seed from an arbitrary tuple of labels and counters."""
    text = "\x1f".join(repr(p) for p in parts)
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") & _MASK63


def make_rng(*parts: object) -> np.random.Generator:
    """Generator seeded from ``derive_seed(*parts)``."""
    return np.random.default_rng(derive_seed(*parts))
