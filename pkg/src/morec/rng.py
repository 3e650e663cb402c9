"""Named random sub-streams derived from one integer seed."""

import zlib

import numpy as np


def named_rng(seed: int, name: str) -> np.random.Generator:
    """Independent generator for ``name``; stable across runs and platforms."""
    return np.random.default_rng([int(seed) & 0xFFFFFFFF, zlib.crc32(name.encode())])


def make_streams(seed: int, *names: str) -> dict[str, np.random.Generator]:
    return {n: named_rng(seed, n) for n in names}
