"""Named, reproducible random substreams derived from one seed."""

import zlib

import numpy as np


def substream_seed(seed: int, name: str) -> int:
    """A 63-bit seed for the substream ``name`` of ``seed``."""
    ss = np.random.SeedSequence([int(seed), zlib.crc32(name.encode())])
    return int(ss.generate_state(2, dtype=np.uint64)[0] >> np.uint64(1))


def substream(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng(substream_seed(seed, name))
