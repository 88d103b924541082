"""Named, seed-derived random streams.

Every consumer of randomness asks for a stream by name, e.g.
``stream(seed, "noise", client, round_idx)``. Streams with different names are
statistically independent and do not depend on the order in which they are
requested, which is what makes parallel client execution reproduce sequential
execution exactly.
"""

from __future__ import annotations

import zlib

import numpy as np


def _key(part) -> int:
    if isinstance(part, (int, np.integer)):
        return int(part) & 0xFFFFFFFF
    return zlib.crc32(str(part).encode("utf-8"))


def stream(seed: int, *names) -> np.random.Generator:
    """Return a fresh generator for the stream ``names`` under ``seed``."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(_key(n) for n in names))
    return np.random.default_rng(ss)


def stream_seed(seed: int, *names) -> int:
    """A 63-bit integer seed for the named stream (used where an id is stored)."""
    return int(stream(seed, *names).integers(0, 2**63 - 1))
