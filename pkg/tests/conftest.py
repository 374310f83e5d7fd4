import numpy as np
import pytest

from anclab.acoustics import AcousticPath


def dft_oracle(x):
    """Direct O(n^2) DFT from the definition; the independent FFT oracle."""
    x = np.asarray(x, dtype=complex)
    n = x.shape[0]
    k = np.arange(n)
    return np.array([np.sum(x * np.exp(-2j * np.pi * k * m / n)) for m in range(n)])


def idft_oracle(x):
    x = np.asarray(x, dtype=complex)
    n = x.shape[0]
    k = np.arange(n)
    return np.array([np.sum(x * np.exp(2j * np.pi * k * m / n)) for m in range(n)]) / n


def decaying_path(length, seed, decay=4.0, delay=0):
    """Random exponentially decaying FIR, optionally delayed."""
    rng = np.random.default_rng(seed)
    taps = rng.standard_normal(length) * np.exp(-np.arange(length) / (length / decay))
    if delay:
        taps[:delay] = 0.0
    return taps


@pytest.fixture(scope="session")
def toy_paths():
    """Short primary/secondary pair for fast closed-loop tests.

    The secondary path peaks at lag 3, so its main delay is well defined.
    """
    p = decaying_path(96, 11)
    s = 0.5 * decaying_path(48, 12, delay=3)
    s[3] = 1.0
    return AcousticPath(p), AcousticPath(s)
