"""Deterministic RNG derivation.

Every random choice in the library flows from an integer seed through
`derive`, so any unit of work (a restart, a target, an augmentation) can be
re-run in isolation and reproduce bit-identical draws.
"""

import zlib

import numpy as np


def _tag_to_int(tag) -> int:
    if isinstance(tag, (int, np.integer)):
        return int(tag) & 0xFFFFFFFF
    return zlib.crc32(str(tag).encode("utf-8"))


def derive(seed: int, *tags) -> np.random.Generator:
    """Child generator for (seed, tags) -- independent of call order."""
    entropy = [int(seed) & 0xFFFFFFFF] + [_tag_to_int(t) for t in tags]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))
