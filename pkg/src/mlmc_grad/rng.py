"""Seed policy: one root seed, hierarchical deterministic splitting.

Every run, sweep cell, and worker derives its generator from the root seed
through `numpy.random.SeedSequence.spawn`, so results are reproducible
regardless of execution order or worker count. The split path is part of
the output contract: (root) -> run stream; (root, cell_index) -> cell
stream; cells further spawn per-purpose children in a documented order.
"""

from __future__ import annotations

import numpy as np

__all__ = ["root_sequence", "run_rng", "cell_rng", "split"]


def root_sequence(seed: int) -> np.random.SeedSequence:
    if seed < 0:
        raise ValueError("seed must be a nonnegative integer")
    return np.random.SeedSequence(seed)


def run_rng(seed: int) -> np.random.Generator:
    """Generator for a single optimization run."""
    return np.random.default_rng(root_sequence(seed))


def cell_rng(seed: int, cell_index: int) -> np.random.Generator:
    """Generator for sweep cell `cell_index` under a root seed.

    Derived via spawn_key so that cells are independent and insensitive to
    scheduling: cell 7 gets the same stream whether run first or last.
    """
    child = np.random.SeedSequence(seed, spawn_key=(cell_index,))
    return np.random.default_rng(child)


def split(rng: np.random.Generator, n: int) -> list[np.random.Generator]:
    """Split `n` child generators off an existing one.

    Children are seeded from the parent stream (not spawn), which keeps the
    parent's consumption deterministic: exactly `n` draws of 64 bits.
    """
    seeds = rng.integers(0, 2**63, size=n, dtype=np.int64)
    return [np.random.default_rng(int(s)) for s in seeds]
