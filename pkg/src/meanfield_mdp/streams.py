"""Reproducible random streams keyed by (seed, replication, time).

Each (replication, time) pair owns a Philox counter-based generator whose
key is derived from the master seed with numpy's SeedSequence.  Particle i
reads the i-th block of draws from that stream, so the numbers a particle
sees do not depend on the ensemble size, on how replications are split
between workers, or on the platform.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["RngSpec", "alias_table", "alias_sample"]


@dataclass(frozen=True)
class RngSpec:
    seed: int

    def __post_init__(self):
        seed = int(self.seed)
        if not 0 <= seed < 2**64:
            raise ValueError(f"seed must be a 64-bit unsigned integer, got {self.seed!r}")
        object.__setattr__(self, "seed", seed)

    def key(self, replication: int, time: int) -> np.ndarray:
        ss = np.random.SeedSequence(self.seed, spawn_key=(int(replication), int(time)))
        return ss.generate_state(2, dtype=np.uint64)

    def generator(self, replication: int, time: int) -> np.random.Generator:
        return np.random.Generator(np.random.Philox(key=self.key(replication, time)))

    def uniforms(self, replication: int, time: int, count: int, per: int = 2) -> np.ndarray:
        """``count`` blocks of ``per`` uniforms on [0, 1); block i belongs to particle i."""
        return self.generator(replication, time).random((count, per))


def alias_table(probs: np.ndarray):
    """Vose alias tables for each row of a row-stochastic matrix."""
    probs = np.atleast_2d(np.asarray(probs, dtype=float))
    rows, k = probs.shape
    accept = np.ones((rows, k))
    alias = np.tile(np.arange(k), (rows, 1))
    for r in range(rows):
        scaled = probs[r] * k
        small = [j for j in range(k) if scaled[j] < 1.0]
        large = [j for j in range(k) if scaled[j] >= 1.0]
        while small and large:
            s = small.pop()
            l = large.pop()
            accept[r, s] = scaled[s]
            alias[r, s] = l
            scaled[l] = scaled[l] + scaled[s] - 1.0
            (small if scaled[l] < 1.0 else large).append(l)
        # leftovers are 1 up to rounding
        for j in small + large:
            accept[r, j] = 1.0
    return accept, alias


def alias_sample(accept: np.ndarray, alias: np.ndarray, rows: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Draw one column per entry of ``rows`` using two uniforms per draw."""
    k = accept.shape[1]
    col = np.minimum((u[:, 0] * k).astype(np.int64), k - 1)
    keep = u[:, 1] < accept[rows, col]
    return np.where(keep, col, alias[rows, col])
