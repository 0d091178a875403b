"""Seeded random streams.

Every random draw in the package goes through :func:`make_rng`, which keys a
counter-based Philox generator by ``(seed, stream)``. Two calls with the same
pair produce the same numbers no matter what else ran before them.
"""

import hashlib

import numpy as np


def stream_key(seed: int, stream: str) -> int:
    """Derive a 128-bit Philox key from a seed and a stream name.

    Args:
        seed: Integer seed (any size, negative allowed)
        stream: Name of the consumer, e.g. 'sample_dataset'

    Returns:
        Non-negative integer key

    """
    seed_string = f'{seed}#{stream}'
    seed_bytes = hashlib.sha256(seed_string.encode()).digest()
    return int.from_bytes(seed_bytes[:16], 'little')


def make_rng(seed: int, stream: str) -> np.random.Generator:
    """Create an independent generator for one ``(seed, stream)`` pair."""
    return np.random.Generator(np.random.Philox(key=stream_key(seed, stream)))


def derive_seed(seed: int, *parts: object) -> int:
    """Derive a child seed from a master seed and a tuple of labels (e.g. grid indices)."""
    label = '/'.join(str(part) for part in parts)
    return stream_key(seed, label) >> 64
