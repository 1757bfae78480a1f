"""Deterministic random streams.

All randomness flows from ``numpy.random.Generator`` objects built on PCG64.
Independent consumers get their own child stream via :func:`split_rng`, so
adding draws to one consumer never shifts another.
"""

from __future__ import annotations

import contextlib

import numpy as np
import torch


def seeded_rng(seed: int) -> np.random.Generator:
    if isinstance(seed, bool) or not isinstance(seed, (int, np.integer)) or seed < 0:
        raise ValueError(f"seed must be a non-negative integer, got {seed!r}")
    return np.random.Generator(np.random.PCG64(int(seed)))


def split_rng(rng: np.random.Generator, n: int) -> list[np.random.Generator]:
    """Spawn ``n`` statistically independent child streams from ``rng``."""
    return list(rng.spawn(n))


def case_rngs(seed: int, n: int) -> list[np.random.Generator]:
    """One stream per case index; stream ``i`` depends only on ``(seed, i)``."""
    children = np.random.SeedSequence(int(seed)).spawn(n)
    return [np.random.Generator(np.random.PCG64(s)) for s in children]


def torch_seed_from(rng: np.random.Generator) -> int:
    return int(rng.integers(0, 2**63 - 1))


@contextlib.contextmanager
def torch_seeded(seed: int):
    """Seed torch's global generator inside the block and restore it afterwards."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(int(seed))
        yield
