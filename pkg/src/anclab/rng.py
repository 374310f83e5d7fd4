"""Reproducible random streams.

All stochastic pieces of the engine (noise synthesis, measurement noise,
parameter init, dataset sampling) draw from named Philox streams.  Philox is
counter-based, so a (seed, stream) pair yields the same sequence on every
platform and run, independent of draw order elsewhere in the program.
"""

import numpy as np

# Stream tags keep independent consumers of the same master seed decorrelated.
STREAM_NOISE = 0x1001
STREAM_MEASUREMENT = 0x1002
STREAM_PARAMS = 0x1003
STREAM_DATASET = 0x1004
STREAM_SHUFFLE = 0x1005
STREAM_EPISODE = 0x1006


def make_rng(seed: int, stream: int = 0) -> np.random.Generator:
    """Return a Generator for (seed, stream), 64-bit counter-based."""
    return np.random.Generator(np.random.Philox(key=(np.uint64(seed) << np.uint64(16)) + np.uint64(stream)))
