"""Named random streams derived from one root seed.

Each consumer asks for its own stream by name, so adding a new consumer never
shifts the numbers an existing one sees.
"""

import zlib

import numpy as np


def stream(seed: int, name: str, *index: int) -> np.random.Generator:
    """Independent generator for ``(seed, name, *index)``."""
    key = [int(seed) & 0xFFFFFFFF, zlib.crc32(name.encode("utf-8"))]
    key.extend(int(i) for i in index)
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(key)))
