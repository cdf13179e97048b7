"""Named, seeded random streams.

Every stochastic component draws from its own stream derived from
(seed, stream name), so runs are reproducible and adding draws to one
component never perturbs another.
"""

import zlib

import numpy as np


def stream(seed: int, name: str) -> np.random.Generator:
    """Return an independent generator keyed by seed and stream name."""
    key = zlib.crc32(name.encode("utf-8"))
    return np.random.default_rng([int(seed) & 0xFFFFFFFF, key])
