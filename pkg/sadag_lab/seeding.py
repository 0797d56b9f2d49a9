"""Named, independent random streams derived from one experiment seed."""

import zlib

import numpy as np


def rng_stream(seed: int, name: str) -> np.random.Generator:
    """Generator for ``name`` under ``seed``; streams with different names never share draws."""
    return np.random.default_rng([int(seed), zlib.crc32(name.encode("utf-8"))])


def derived_seed(seed: int, name: str) -> int:
    return int(rng_stream(seed, name).integers(0, 2**31 - 1))
