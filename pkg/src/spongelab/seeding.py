"""Deterministic RNG derivation: one root seed, stable per-component streams."""

import zlib

import numpy as np


def derive_seed(root_seed: int, *labels: str) -> int:
    """Stable child seed for a component, independent of call order."""
    h = root_seed & 0xFFFFFFFF
    for label in labels:
        h = zlib.crc32(label.encode("utf-8"), h)
    return h


def derive_rng(root_seed: int, *labels: str) -> np.random.Generator:
    return np.random.default_rng(derive_seed(root_seed, *labels))
