"""Counter-based random streams keyed by (seed, index, stream name)."""

from __future__ import annotations

import zlib

import numpy as np


def _stream_id(name) -> int:
    if isinstance(name, (int, np.integer)):
        return int(name)
    return zlib.crc32(str(name).encode())


def stream(seed, *keys) -> np.random.Generator:
    """Independent Philox generator for a key path; same key, same numbers."""
    words = [int(seed) & 0xFFFFFFFFFFFFFFFF] + [_stream_id(k) for k in keys]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(words)))
