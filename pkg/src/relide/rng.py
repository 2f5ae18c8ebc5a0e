"""Seed handling.

Every stochastic routine takes an explicit ``numpy.random.Generator``.  Streams
are built on Philox, a counter-based bit generator, so independent substreams
can be spawned without coordination between workers.
"""

from __future__ import annotations

import numpy as np

MASK64 = (1 << 64) - 1


def splitmix64(x: int) -> int:
    """One step of the splitmix64 output function on a 64-bit integer."""
    z = (x + 0x9E3779B97F4A7C15) & MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def replication_seed(base_seed: int, replication: int) -> int:
    """Seed of replication ``r``: ``splitmix64(base_seed XOR r)``."""
    return splitmix64((int(base_seed) ^ int(replication)) & MASK64)


def make_rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    if isinstance(seed, np.random.SeedSequence):
        return np.random.Generator(np.random.Philox(seed))
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))


def spawn(rng: np.random.Generator, n: int) -> list[np.random.Generator]:
    """Independent child streams of ``rng``."""
    return [np.random.Generator(bg) for bg in rng.bit_generator.spawn(n)]


def lanes(seed: int, names) -> dict[str, np.random.Generator]:
    """Named, mutually independent streams derived from one integer seed.

    The same ``(seed, name)`` pair always yields the same stream regardless of
    which other names are requested.
    """
    out = {}
    for name in names:
        key = [int(b) for b in name.encode()]
        out[name] = make_rng(np.random.SeedSequence([int(seed) & MASK64, *key]))
    return out
