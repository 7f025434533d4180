"""Named random streams derived from one master seed."""

from __future__ import annotations

import zlib

import numpy as np

STREAMS = ("backbone", "experts", "data", "synthetic", "sample", "gradcheck")


def stream_seed(master: int, stream: str) -> int:
    """A 63-bit seed for ``stream`` that depends only on (master, stream)."""
    ss = np.random.SeedSequence(entropy=int(master), spawn_key=(zlib.crc32(stream.encode()),))
    return int(ss.generate_state(1, dtype=np.uint64)[0]) >> 1


def stream_rng(master: int, stream: str, *extra: int) -> np.random.Generator:
    if extra:
        return np.random.default_rng([stream_seed(master, stream), *extra])
    return np.random.default_rng(stream_seed(master, stream))
