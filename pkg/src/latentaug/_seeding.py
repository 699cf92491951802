"""Deterministic RNG derivation shared across modules.

Every stochastic operation in the toolkit draws from a generator derived
from a non-negative master seed plus an integer key path, so results are
reproducible and independent of execution order (tasks can run in
parallel without changing any stream).
"""

from __future__ import annotations

import numpy as np


def check_seed(seed: int, name: str = "seed") -> int:
    """Validate a user-supplied seed (non-negative int that fits in 64 bits)."""
    seed = int(seed)
    if seed < 0 or seed >= 2**64:
        raise ValueError(f"{name} must be a non-negative 64-bit integer, got {seed}")
    return seed


def derive_rng(master_seed: int, *key: int) -> np.random.Generator:
    """Return a generator for the stream identified by (master_seed, *key)."""
    entropy = [check_seed(master_seed, "master_seed")] + [int(k) for k in key]
    return np.random.default_rng(np.random.SeedSequence(entropy))


def derive_seeds(master_seed: int, *key: int, count: int = 1) -> np.ndarray:
    """Derive `count` independent 32-bit seeds for the given key path."""
    entropy = [check_seed(master_seed, "master_seed")] + [int(k) for k in key]
    return np.random.SeedSequence(entropy).generate_state(count)
