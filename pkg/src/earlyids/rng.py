"""Named random substreams derived from a single run seed."""

from __future__ import annotations

import zlib

import numpy as np

DEFAULT_SEED = 20240611


def substream(seed: int, *names: object) -> np.random.Generator:
    """Independent generator for ``(seed, *names)``.

    The same path always yields the same stream, regardless of how many other
    streams were created before it, so parallel scheduling never changes results.
    """
    key = [int(seed) & 0xFFFFFFFF]
    for name in names:
        if isinstance(name, int):
            key.append(name & 0xFFFFFFFF)
        else:
            key.append(zlib.crc32(str(name).encode("utf-8")))
    return np.random.default_rng(np.random.SeedSequence(key))
