"""Seed derivation. Every random stream descends from one integer seed."""

from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(seed: int, label: str) -> int:
    """Stable 64-bit child seed for a named component (hash based, not ``hash()``)."""
    digest = hashlib.blake2b(f"{int(seed)}:{label}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def window_rng(seed: int, origin, channel=None) -> np.random.Generator:
    """Generator keyed by (seed, window position) so draws do not depend on visit order."""
    key = [int(seed) & 0xFFFFFFFFFFFFFFFF, *(int(o) for o in origin)]
    key.append(0 if channel is None else int(channel) + 1)
    return np.random.default_rng(np.random.SeedSequence(key))
