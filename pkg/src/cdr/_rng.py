import zlib

import numpy as np


def substream(seed, name, *keys):
    """Independent, reproducible generator for a named purpose under a root seed."""
    entropy = [int(seed) & 0xFFFFFFFF, zlib.crc32(name.encode("utf-8"))]
    entropy.extend(int(k) & 0xFFFFFFFF for k in keys)
    return np.random.default_rng(np.random.SeedSequence(entropy))
