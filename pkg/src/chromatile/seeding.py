"""Deterministic seed derivation.

Every stochastic component (weight init, shuffling, augmentation, synthetic
data) draws from a Generator seeded by ``derive_seed(master, role)``.  The
derivation hashes with SHA-256, never with Python's builtin ``hash`` (which is
salted per process), so the same master seed and role name give the same
stream on every run and every machine.
"""

import hashlib

import numpy as np


def derive_seed(master: int, role: str) -> int:
    """Return a stable 64-bit sub-seed for a named role under one master seed."""
    payload = f"{master}\x1f{role}".encode("utf-8")
    digest = hashlib.sha256(payload).digest()
    return int.from_bytes(digest[:8], "little")


def rng_for(master: int, role: str) -> np.random.Generator:
    """A PCG64 generator dedicated to ``role`` under ``master``."""
    return np.random.Generator(np.random.PCG64(derive_seed(master, role)))
