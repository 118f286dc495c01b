import zlib

import numpy as np


def rng_for(seed: int, *names) -> np.random.Generator:
    """Independent generator for a (seed, purpose) pair.

    Each named purpose gets its own stream, so skipping one consumer never
    shifts the draws seen by another.
    """
    key = [int(seed)] + [zlib.crc32(str(n).encode()) for n in names]
    return np.random.default_rng(np.random.SeedSequence(key))
