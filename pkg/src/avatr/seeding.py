"""Deterministic random-stream derivation.

Every random choice in the package (parameter init, corpus synthesis,
episode sampling, dropout masks) draws from a substream derived from one
top-level seed plus a string label and optional integer indices, so any
component can be re-seeded independently and whole runs replay exactly.
"""

import zlib

import numpy as np


def substream(seed, label, *indices):
    """Return a ``numpy.random.Generator`` for a named substream.

    Args:
        seed: top-level integer seed.
        label: stable string naming the stream ("init", "episodes", ...).
        *indices: optional integers (epoch, batch, item) separating draws.
    """
    key = [int(seed) & 0xFFFFFFFF, zlib.crc32(label.encode("utf-8"))]
    key.extend(int(i) & 0xFFFFFFFF for i in indices)
    return np.random.default_rng(np.random.SeedSequence(key))
