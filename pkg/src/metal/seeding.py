"""Named random substreams derived from a single run seed."""
from __future__ import annotations

import zlib

import numpy as np


def substream(seed: int, name: str, *index: int) -> np.random.Generator:
    """Independent generator for ``(seed, name, *index)``.

    The name is hashed with crc32 so the stream is stable across processes
    and Python versions.
    """
    key = [int(seed), zlib.crc32(name.encode())] + [int(i) for i in index]
    return np.random.default_rng(np.random.SeedSequence(key))
