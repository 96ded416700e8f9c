"""Deterministic named RNG streams.

Every consumer of randomness asks for a stream by (root seed, name path);
the same pair always yields an identical generator, and distinct names are
statistically independent.  This is what makes same-seed reruns bitwise
reproducible regardless of evaluation order between components.
"""

from __future__ import annotations

import zlib

import numpy as np

from .core import ParamError, Tensor


def stream(seed: int, *path: str | int) -> np.random.Generator:
    """Generator for a named stream under a root seed.

    String path parts are hashed with crc32 so names stay readable at call
    sites; integer parts (epoch, image index) pass through unchanged.
    """
    keys = [int(seed) & 0xFFFFFFFF]
    for part in path:
        if isinstance(part, str):
            keys.append(zlib.crc32(part.encode("utf-8")))
        else:
            keys.append(int(part) & 0xFFFFFFFF)
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(keys)))


def sample_normal(shape, mean: float, stddev: float, rng: np.random.Generator, dtype=np.float32) -> Tensor:
    """Gaussian tensor draw.  Negative stddev is a parameter error."""
    if stddev < 0:
        raise ParamError(f"sample_normal: stddev must be >= 0, got {stddev}")
    data = rng.normal(loc=mean, scale=stddev, size=tuple(shape)).astype(dtype)
    return Tensor(data)


def sample_uniform(shape, low: float, high: float, rng: np.random.Generator, dtype=np.float32) -> Tensor:
    if high < low:
        raise ParamError(f"sample_uniform: empty interval [{low}, {high}]")
    data = rng.uniform(low, high, size=tuple(shape)).astype(dtype)
    return Tensor(data)
