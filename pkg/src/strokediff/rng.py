"""Seed derivation.

Every random stream in the package comes from one integer seed split by
string keys, so streams for different purposes are independent but
reproducible. Splitting goes through :class:`numpy.random.SeedSequence` and
streams are drawn from the counter-based Philox bit generator.
"""

from __future__ import annotations

import hashlib

import numpy as np
import torch


def _key_words(keys: tuple[object, ...]) -> tuple[int, ...]:
    words = []
    for key in keys:
        if isinstance(key, (int, np.integer)):
            words.append(int(key) & 0xFFFFFFFF)
        else:
            digest = hashlib.sha256(str(key).encode()).digest()
            words.append(int.from_bytes(digest[:4], "little"))
    return tuple(words)


def seed_sequence(seed: int, *keys: object) -> np.random.SeedSequence:
    return np.random.SeedSequence(int(seed) & (2**64 - 1), spawn_key=_key_words(keys))


def derive_seed(seed: int, *keys: object) -> int:
    """Return a 63-bit integer seed for the stream named by ``keys``."""
    state = seed_sequence(seed, *keys).generate_state(2, dtype=np.uint32)
    return (int(state[0]) << 31 | int(state[1]) >> 1) & (2**63 - 1)


def numpy_rng(seed: int, *keys: object) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(seed_sequence(seed, *keys)))


def torch_generator(seed: int, *keys: object) -> torch.Generator:
    gen = torch.Generator()
    gen.manual_seed(derive_seed(seed, *keys))
    return gen
