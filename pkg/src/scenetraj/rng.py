"""Named random substreams fanned out from one root seed."""
from __future__ import annotations

import zlib

import numpy as np

STREAMS = ("synth", "split", "init_ped", "init_scene", "dropout", "sample")


def substream_seed(root: int, name: str) -> int:
    """Stable 64-bit seed for ``name``; independent of Python's hash salt."""
    if root < 0:
        raise ValueError("root seed must be non-negative")
    ss = np.random.SeedSequence([int(root), zlib.crc32(name.encode())])
    return int(ss.generate_state(2, np.uint32).astype(np.uint64) @ np.array([1, 1 << 32], dtype=np.uint64))


def substream(root: int, name: str) -> np.random.Generator:
    return np.random.default_rng(substream_seed(root, name))
