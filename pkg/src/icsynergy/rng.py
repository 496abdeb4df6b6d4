"""Counter-based random streams derived from one 64-bit seed.

Every stochastic operation asks for its own stream keyed by a tag (and
optionally a counter such as an epoch or a tuple index), so that the
sequence of draws in one operation never depends on how many draws some
other operation made.
"""
from __future__ import annotations

import zlib

import numpy as np

_MASK64 = (1 << 64) - 1


def _key(part: int | str) -> int:
    if isinstance(part, str):
        return zlib.crc32(part.encode("utf-8"))
    return int(part) & 0xFFFFFFFF


def stream(seed: int, *keys: int | str) -> np.random.Generator:
    """Philox generator for ``(seed, *keys)``."""
    ss = np.random.SeedSequence(entropy=int(seed) & _MASK64, spawn_key=tuple(_key(k) for k in keys))
    return np.random.Generator(np.random.Philox(ss))


def torch_seed(seed: int, *keys: int | str) -> int:
    """A 63-bit integer suitable for ``torch.manual_seed``."""
    return int(stream(seed, *keys).integers(0, 2**63 - 1))
