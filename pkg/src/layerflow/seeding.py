"""Named random streams derived from one global seed.

Each stream is a child of ``numpy.random.SeedSequence(seed)`` keyed by a
stable hash of its name, so adding a stream never shifts the others.
"""

from __future__ import annotations

import zlib

import numpy as np
import torch


def stream(seed: int, name: str) -> np.random.SeedSequence:
    return np.random.SeedSequence(seed, spawn_key=(zlib.crc32(name.encode("utf-8")),))


def stream_int(seed: int, name: str) -> int:
    return int(stream(seed, name).generate_state(1, dtype=np.uint32)[0])


def numpy_rng(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng(stream(seed, name))


def torch_generator(seed: int, name: str) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(stream_int(seed, name))
    return g
