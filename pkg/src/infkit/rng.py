"""
Seed splitting.

Every random draw in the package comes from one 64-bit root seed. A
sub-computation asks for a named stream; the stream's generator is seeded
by ``SeedSequence(root, spawn_key=(crc32(name), *extra))``, so streams are
independent of each other and of the order in which they are requested.
"""

from __future__ import annotations

import zlib

import numpy as np

STREAMS = ("data", "init", "train", "selection", "influence", "backdoor", "retrain", "probe")


def stream_key(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


def seed_for(root: int, name: str, *extra: int) -> int:
    """Derived 63-bit integer seed for stream ``name``."""
    seq = np.random.SeedSequence(int(root) & (2**64 - 1), spawn_key=(stream_key(name), *map(int, extra)))
    return int(seq.generate_state(2, dtype=np.uint32).view(np.uint64)[0] >> np.uint64(1))


def generator(root: int, name: str, *extra: int) -> np.random.Generator:
    return np.random.default_rng(seed_for(root, name, *extra))
