"""Derive independent sub-seeds from one run seed."""

from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(seed: int, purpose: str) -> int:
    """Stable 64-bit seed for ``(seed, purpose)``; same inputs give the same value on every platform."""
    digest = hashlib.sha256(f"{int(seed)}:{purpose}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def rng_for(seed: int, purpose: str) -> np.random.Generator:
    return np.random.default_rng(derive_seed(seed, purpose))
