"""Stateless seed derivation: every random draw is keyed by its role."""

from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(*keys) -> int:
    """64-bit seed from an arbitrary tuple of ints and strings."""
    ints = []
    for k in keys:
        if isinstance(k, str):
            ints.append(int.from_bytes(hashlib.sha256(k.encode()).digest()[:4], "little"))
        else:
            k = int(k)
            ints.extend([k & 0xFFFFFFFF, (k >> 32) & 0xFFFFFFFF])
    lo, hi = np.random.SeedSequence(ints).generate_state(2, np.uint32)
    return int(lo) | (int(hi) << 32)
