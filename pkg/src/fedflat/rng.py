"""Keyed random streams derived from a single master seed.

Every source of randomness in a simulation run is a separate stream keyed by
(purpose, device, round). Two streams with different keys are statistically
independent, and a stream's output never depends on how many draws other
streams have made. This is what makes device-level parallelism bit-reproducible:
each worker owns its own generator, so execution order cannot change results.
"""

from __future__ import annotations

import zlib

import numpy as np

__all__ = ["stream"]


def stream(master_seed: int, purpose: str, device: int = 0, round_: int = 0) -> np.random.Generator:
    """Return the generator for stream (purpose, device, round_) under master_seed.

    Identical arguments always yield a generator producing an identical
    sequence, regardless of what any other stream has drawn.
    """
    if master_seed < 0:
        raise ValueError(f"master_seed must be nonnegative, got {master_seed}")
    if device < 0 or round_ < 0:
        raise ValueError("device and round_ must be nonnegative")
    key = (zlib.crc32(purpose.encode("utf-8")), device, round_)
    return np.random.default_rng(np.random.SeedSequence(entropy=master_seed, spawn_key=key))
