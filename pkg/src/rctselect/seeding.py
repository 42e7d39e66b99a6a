"""Counter-based seed derivation.

Every random stream is keyed on ``(master seed, stream tag, *counters)`` through
``numpy.random.SeedSequence.spawn_key``, so draws never depend on execution order.
"""

import numpy as np

GENERATOR_STREAM = 1
SPLIT_STREAM = 2
MOM_STREAM = 3


def derived_rng(seed: int, stream: int, *counters: int) -> np.random.Generator:
    if seed < 0:
        raise ValueError("seed must be a nonnegative integer")
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(stream, *counters)))
