"""Named random streams derived from one run seed."""

import zlib

import numpy as np


def rng_stream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for one purpose (init, dropout, shuffle, split, ...)."""
    return np.random.default_rng([seed, zlib.crc32(name.encode())])
