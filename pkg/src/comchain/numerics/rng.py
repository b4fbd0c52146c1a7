"""Named deterministic random streams.

Every stream is a numpy ``Generator`` over the PCG64 bit generator, seeded
from ``SeedSequence([seed, crc32(name_1), crc32(name_2), ...])``. Keying
streams by name (e.g. the tensor name being initialised) keeps draws
independent of iteration order, so the same (seed, name) always yields the
same numbers within a build.
"""
from __future__ import annotations

import zlib

import numpy as np


def _key(part) -> int:
    if isinstance(part, (int, np.integer)):
        return int(part) & 0xFFFFFFFF
    return zlib.crc32(str(part).encode("utf-8"))


def make_rng(seed: int, *names) -> np.random.Generator:
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF] + [_key(n) for n in names]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))


def truncated_normal(rng: np.random.Generator, shape, std: float = 0.02,
                     clip: float = 2.0, dtype=np.float32) -> np.ndarray:
    """Normal(0, std) samples redrawn until inside ``±clip·std``."""
    shape = tuple(shape)
    out = rng.standard_normal(shape)
    bad = np.abs(out) > clip
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > clip
    return (out * std).astype(dtype)
