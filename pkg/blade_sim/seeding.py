"""
Seed derivation shared by every stochastic component.

Seeds are derived by hashing the labelled parts with SHA-256 so the chain
(task seed, client id, round, epoch, ...) is stable across platforms and
Python hash randomisation.
"""
import hashlib

import numpy as np


def derive_seed(*parts) -> int:
    """Derive a 64-bit seed from an ordered tuple of labels/integers"""
    sha = hashlib.sha256()
    for part in parts:
        sha.update(repr(part).encode("utf-8"))
        sha.update(b"\x1f")
    return int.from_bytes(sha.digest()[:8], "little")


def rng_for(*parts) -> np.random.Generator:
    return np.random.default_rng(derive_seed(*parts))
