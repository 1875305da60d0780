"""Seeding helpers.

All randomness in the package flows through numpy's PCG64 generator.  Child
seeds are derived from a root seed plus string/int keys with blake2b, so the
same (seed, key path) always yields the same stream regardless of call order.
"""

from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(root: int, *keys: object) -> int:
    """Derive a 64-bit child seed from a root seed and a key path."""
    h = hashlib.blake2b(digest_size=8)
    h.update(int(root).to_bytes(8, "little", signed=False))
    for key in keys:
        h.update(b"\x1f")
        h.update(str(key).encode("utf-8"))
    return int.from_bytes(h.digest(), "little")


def make_rng(seed: int, *keys: object) -> np.random.Generator:
    """PCG64 generator for ``seed`` (optionally sub-keyed via derive_seed)."""
    if keys:
        seed = derive_seed(seed, *keys)
    return np.random.Generator(np.random.PCG64(seed))
