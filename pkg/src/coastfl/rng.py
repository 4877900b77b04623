"""Seed derivation.

Every random stream in a run is rooted at one master seed. Child seeds are
derived by folding each key into the state with splitmix64::

    state = root
    for key in keys:
        state = splitmix64(state ^ splitmix64(key + 0x9E3779B97F4A7C15))

so ``derive_seed(s, "noise", 3)`` is stable across platforms and Python
versions. String keys are first reduced to an integer with CRC-32.
"""

from __future__ import annotations

import zlib

import numpy as np

_MASK = (1 << 64) - 1


def splitmix64(x: int) -> int:
    z = (x + 0x9E3779B97F4A7C15) & _MASK
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return z ^ (z >> 31)


def _key_int(key: int | str) -> int:
    if isinstance(key, str):
        return zlib.crc32(key.encode("utf-8"))
    return int(key) & _MASK


def derive_seed(root: int, *keys: int | str) -> int:
    state = int(root) & _MASK
    for key in keys:
        state = splitmix64(state ^ splitmix64((_key_int(key) + 0x9E3779B97F4A7C15) & _MASK))
    return state


def make_rng(root: int, *keys: int | str) -> np.random.Generator:
    return np.random.default_rng(derive_seed(root, *keys))
