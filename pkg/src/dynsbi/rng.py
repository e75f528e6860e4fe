"""Seed handling.

Every stochastic routine accepts ``seed`` as an int, a ``SeedSequence`` or a
ready ``Generator``. Generators are backed by Philox, a counter-based bit
generator, so derived streams are independent and reproducible.
"""

from __future__ import annotations

from typing import Union

import numpy as np

SeedLike = Union[int, np.integer, np.random.SeedSequence, np.random.Generator]


def as_seed_sequence(seed: SeedLike) -> np.random.SeedSequence:
    if isinstance(seed, np.random.SeedSequence):
        return seed
    if isinstance(seed, np.random.Generator):
        # derive from the generator's own stream so repeated calls differ
        return np.random.SeedSequence(seed.integers(0, 2**63 - 1, size=4))
    if isinstance(seed, (int, np.integer)) and not isinstance(seed, bool):
        if seed < 0:
            raise ValueError(f"seed must be non-negative, got {seed}")
        return np.random.SeedSequence(int(seed))
    raise TypeError(f"unsupported seed type {type(seed).__name__}")


def as_rng(seed: SeedLike) -> np.random.Generator:
    """Return a Generator for ``seed``; generators pass through unchanged."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.Generator(np.random.Philox(as_seed_sequence(seed)))


def spawn(seed: SeedLike, n: int) -> list[np.random.SeedSequence]:
    """Derive ``n`` independent child seed sequences."""
    return as_seed_sequence(seed).spawn(n)


def seed_record(seed: SeedLike):
    """A JSON-friendly description of ``seed`` for manifests."""
    if isinstance(seed, (int, np.integer)):
        return int(seed)
    if isinstance(seed, np.random.SeedSequence):
        ent = seed.entropy
        return {"entropy": ent if isinstance(ent, int) else [int(v) for v in ent],
                "spawn_key": [int(v) for v in seed.spawn_key]}
    return None
