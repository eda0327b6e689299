"""Deterministic RNG substreams derived from one master seed.

Every stochastic component (policy sampling, learner init, data sampling)
pulls from its own named substream so that consuming randomness in one
component never shifts another. This is what makes run records exactly
reproducible and lets independent (combination x seed) runs execute in
parallel without sharing generator state.
"""
from __future__ import annotations

import hashlib

import numpy as np

PathPart = int | str


def _part_to_int(part: PathPart) -> int:
    if isinstance(part, bool):  # bool is an int subclass; keep it out of seeds
        raise TypeError("seed path parts must be ints or strings, not bool")
    if isinstance(part, int):
        if part < 0:
            raise ValueError("seed path ints must be non-negative")
        return part
    digest = hashlib.sha256(part.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def substream(seed: PathPart | tuple[PathPart, ...], *path: PathPart) -> np.random.Generator:
    """Return a Generator for the substream named by (seed, *path).

    Same arguments always yield the same stream; any difference in the path
    yields a statistically independent one.
    """
    parts = seed if isinstance(seed, tuple) else (seed,)
    entropy = [_part_to_int(p) for p in (*parts, *path)]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))
