"""Deterministic fan-out of one master seed into per-component seeds (splitmix64)."""

from __future__ import annotations

import zlib

import numpy as np

_MASK = (1 << 64) - 1


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return z ^ (z >> 31)


def derive_seed(master: int, label: str) -> int:
    """Seed for component ``label``: splitmix64(master XOR crc32(label))."""
    return splitmix64((int(master) & _MASK) ^ zlib.crc32(label.encode()))


def component_rng(master: int, label: str) -> np.random.Generator:
    return np.random.default_rng(derive_seed(master, label))
