"""
Random Streams
Named numpy Generators derived from a run seed.
"""

import zlib

import numpy as np


def stream(seed: int, name: str) -> np.random.Generator:
    """
    Independent generator for one concern of a run

    The same (seed, name) pair always yields the same stream, and streams with
    different names never share state.

    Args:
        seed: run seed
        name: concern, e.g. 'data', 'init', 'train', 'eval', 'pretrain'

    Returns:
        numpy Generator (PCG64)
    """
    return np.random.default_rng(np.random.SeedSequence([int(seed), zlib.crc32(name.encode('utf-8'))]))
