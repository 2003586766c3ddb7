"""Named, independent random streams derived from one 64-bit seed."""
import zlib

import numpy as np


def stream(seed: int, name: str) -> np.random.Generator:
    """Generator for subsystem ``name``; streams never share state."""
    key = zlib.crc32(name.encode("utf-8"))
    ss = np.random.SeedSequence(int(seed) & 0xFFFFFFFFFFFFFFFF, spawn_key=(key,))
    return np.random.Generator(np.random.PCG64(ss))
