"""Classical adaptive controllers: FxLMS, NFxLMS, and delayless subband NFxLMS.

These serve both as competitors in the evaluation harness and as exact
oracles for equivalence tests against the learned update rule.
"""

from dataclasses import dataclass, field

import numpy as np

from . import dsp
from .errors import ConfigurationError
from .filterbank import FilterBank, stack_fft1

DEFAULT_EPSILON = 1e-8


@dataclass
class AdaptiveFilterState:
    """Fullband real LMS-family filter state."""

    n_taps: int
    mu: float
    epsilon: float = DEFAULT_EPSILON
    w: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.mu < 0:
            raise ConfigurationError("step size must be >= 0")
        if self.epsilon < 0:
            raise ConfigurationError("epsilon must be >= 0")
        if self.w is None:
            self.w = np.zeros(self.n_taps)
        self.w = np.asarray(self.w, dtype=float)
        if self.w.shape != (self.n_taps,):
            raise ConfigurationError("weight vector shape mismatch")


def fxlms_update(state: AdaptiveFilterState, xf_window: np.ndarray, e_n: float) -> None:
    """w <- w - mu * x_f(n) * e(n) over the newest-first lag window."""
    state.w -= state.mu * e_n * xf_window


def nfxlms_update(state: AdaptiveFilterState, xf_window: np.ndarray, e_n: float) -> None:
    """FxLMS step normalised by the regressor power plus epsilon."""
    norm = float(np.dot(xf_window, xf_window))
    state.w -= (state.mu * e_n / (norm + state.epsilon)) * xf_window


@dataclass
class SubbandLmsState:
    """Per-subband complex NLMS weights (time domain, length Q = 2N/K each)."""

    bank: FilterBank
    mu: float
    epsilon: float = DEFAULT_EPSILON
    w_k: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.w_k is None:
            self.w_k = np.zeros((self.bank.K, self.bank.Q), dtype=complex)
        self.w_k = np.asarray(self.w_k, dtype=complex)
        if self.w_k.shape != (self.bank.K, self.bank.Q):
            raise ConfigurationError("subband weight shape mismatch")


def dsnfxlms_update(state: SubbandLmsState, x_fk_windows: np.ndarray,
                    e_k: np.ndarray) -> None:
    """Complex NLMS step in every subband with the conjugated regressor.

    x_fk_windows: (K, Q) complex, newest-first decimated regressor per band.
    e_k: (K,) complex subband error samples at this update instant.
    """
    norms = np.sum(np.abs(x_fk_windows) ** 2, axis=-1).real
    scale = state.mu * e_k / (norms + state.epsilon)
    state.w_k -= scale[:, None] * np.conj(x_fk_windows)


def dsnfxlms_fullband(state: SubbandLmsState) -> np.ndarray:
    """Real fullband FIR via per-band FFT and the band-interleaved stacking."""
    return stack_fft1(dsp.fft(state.w_k), state.bank.n_taps)


def subband_nlms_gradient(x_fk_windows: np.ndarray, e_k: np.ndarray,
                          epsilon: float, n_taps: int, K: int) -> np.ndarray:
    """Half-spectrum gradient equivalent to one dsnfxlms_update step.

    Maps the per-band normalised-LMS weight change into the fullband bins of
    the band-interleaved stacking, so that updating half-spectrum weights by
    -mu * gradient reproduces the subband baseline exactly.  Only the first
    K/2 bands feed bins below N/2, so `x_fk_windows` may hold just those.
    """
    from .filterbank import fft1_band_map

    norms = np.sum(np.abs(x_fk_windows) ** 2, axis=-1).real
    delta = (e_k / (norms + epsilon))[:, None] * np.conj(x_fk_windows)
    delta_f = dsp.fft(delta)
    band, bins = fft1_band_map(n_taps, K)
    return delta_f[band, bins]
