"""Named, seeded random substreams.

Every consumer (victim map, PARA, workload generators) draws from its own
stream derived from the master seed and a stable name, so adding or removing
one consumer never shifts another's numbers.
"""

import zlib

import numpy as np


def derive_seed(master: int, name: str) -> int:
    ss = np.random.SeedSequence(entropy=master, spawn_key=(zlib.crc32(name.encode()),))
    return int(ss.generate_state(1, np.uint64)[0])


def substream(master: int, name: str) -> np.random.Generator:
    return np.random.default_rng(derive_seed(master, name))
