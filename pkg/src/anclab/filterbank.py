"""Polyphase analysis filter bank and fullband weight stacking.

The bank is a complex-modulated lowpass prototype: a_k[q] = c_q e^{j2πqk/K},
decimation D = K/2, subband filter length Q = N/D.  Subband features are
Q-point FFTs of the decimated subband histories.  Two stacking rules map
frequency-domain weights back to a real fullband FIR: the direct Hermitian
mirror of a half-spectrum, and the band-interleaved map used by the subband
LMS baseline.
"""

from dataclasses import dataclass

import numpy as np

from . import dsp
from .errors import ConfigurationError, InternalInvariantError

STACK_RESIDUE_TOL = 1e-12


def design_prototype(K: int, Q: int) -> np.ndarray:
    """Length-Q Hamming-windowed sinc lowpass, cutoff pi/K, unity DC gain."""
    if K < 2 or K % 2 != 0:
        raise ConfigurationError("subband count K must be even and >= 2")
    if Q < 8:
        raise ConfigurationError("prototype length Q must be >= 8")
    t = np.arange(Q) - (Q - 1) / 2.0
    c = np.sinc(t / K) * np.hamming(Q)
    return c / c.sum()


def analysis_coeffs(c: np.ndarray, K: int) -> np.ndarray:
    """Complex modulation of the prototype: a[k, q] = c_q e^{j2πqk/K}."""
    c = np.asarray(c, dtype=float)
    q = np.arange(c.shape[0])
    k = np.arange(K)
    return c[None, :] * np.exp(2j * np.pi * np.outer(k, q) / K)


@dataclass(frozen=True)
class FilterBank:
    """Immutable analysis bank; shareable across episodes and threads."""

    K: int
    D: int
    Q: int
    prototype: np.ndarray
    analysis: np.ndarray  # (K, Q) complex

    @classmethod
    def design(cls, n_taps: int, K: int) -> "FilterBank":
        D = K // 2
        if D < 1 or K % 2 != 0:
            raise ConfigurationError("K must be even")
        if n_taps % D != 0:
            raise ConfigurationError(f"decimation {D} must divide the filter length {n_taps}")
        Q = n_taps // D
        c = design_prototype(K, Q)
        return cls(K=K, D=D, Q=Q, prototype=c, analysis=analysis_coeffs(c, K))

    @property
    def n_taps(self) -> int:
        return self.Q * self.D

    @property
    def used_bands(self) -> int:
        """Bands carrying independent information for a real input: K/2."""
        return self.K // 2


def subband_analyze(bank: FilterBank, xf_hist: dsp.DelayLine,
                    e_hist: dsp.DelayLine) -> tuple[np.ndarray, np.ndarray]:
    """Subband samples at the current instant: a_k^T against the strided
    newest-first histories (lags 0, D, ..., (Q-1)D).  Returns (x_fk, e_k),
    each of shape (K,) complex."""
    xw = xf_hist.window(bank.Q, bank.D)
    ew = e_hist.window(bank.Q, bank.D)
    return bank.analysis @ xw, bank.analysis @ ew


@dataclass
class SubbandFrame:
    """Per-instant complex features for the bands fed to the update rule.

    x_ff[k] is the Q-point FFT over the Q most recent decimated samples of
    subband k's filtered reference (newest first); e_f[k] is the Q-point FFT
    of that subband's current error sample padded with Q-1 leading zeros.
    """

    x_ff: np.ndarray  # (bands, Q) complex
    e_f: np.ndarray   # (bands, Q) complex


def subband_features(bank: FilterBank, x_fk_recent: np.ndarray,
                     e_k_now: np.ndarray) -> SubbandFrame:
    """Build a SubbandFrame from newest-first decimated subband histories.

    x_fk_recent: (bands, Q) complex, newest sample first per band.
    e_k_now:     (bands,) complex, the current subband error samples.
    """
    x_fk_recent = np.asarray(x_fk_recent)
    e_k_now = np.asarray(e_k_now)
    if x_fk_recent.shape[-1] != bank.Q:
        raise ConfigurationError(
            f"subband history must hold Q={bank.Q} entries, got {x_fk_recent.shape[-1]}")
    x_ff = dsp.fft(x_fk_recent)
    padded = np.zeros(e_k_now.shape + (bank.Q,), dtype=complex)
    padded[..., -1] = e_k_now
    e_f = dsp.fft(padded)
    return SubbandFrame(x_ff=x_ff, e_f=e_f)


@dataclass
class SubbandWeights:
    """Half-spectrum fullband weights updated directly in the frequency domain."""

    w_s: np.ndarray  # (N/2,) complex
    n_taps: int

    def __post_init__(self):
        self.w_s = np.asarray(self.w_s, dtype=complex)
        if self.w_s.shape[0] != self.n_taps // 2:
            raise ConfigurationError("w_s must hold n_taps/2 bins")

    @classmethod
    def zeros(cls, n_taps: int) -> "SubbandWeights":
        return cls(w_s=np.zeros(n_taps // 2, dtype=complex), n_taps=n_taps)


def hermitian_spectrum(half: np.ndarray, n_taps: int) -> np.ndarray:
    """Full spectrum from a half-spectrum: identity below N/2, zero at N/2,
    conjugate mirror above.  Bin 0 keeps only its real part so the inverse
    transform is real."""
    full = np.zeros(half.shape[:-1] + (n_taps,), dtype=complex)
    full[..., 0] = half[..., 0].real
    full[..., 1 : n_taps // 2] = half[..., 1:]
    full[..., n_taps // 2 + 1 :] = np.conj(half[..., 1:])[..., ::-1]
    return full


def _real_ifft_checked(spectrum: np.ndarray) -> np.ndarray:
    w = dsp.ifft(spectrum)
    residue = float(np.max(np.abs(w.imag))) if w.size else 0.0
    # the guard flags assembly mistakes, not transform roundoff, so the
    # tolerance follows the spectrum scale once it exceeds unit magnitude
    scale = max(1.0, float(np.max(np.abs(spectrum))) if spectrum.size else 1.0)
    if residue > STACK_RESIDUE_TOL * scale:
        raise InternalInvariantError(
            f"stacked spectrum is not Hermitian: imaginary residue {residue:.3e}")
    return np.ascontiguousarray(w.real)


def stack_direct(weights: SubbandWeights) -> np.ndarray:
    """Real fullband FIR from the half-spectrum weights (direct stacking)."""
    return _real_ifft_checked(hermitian_spectrum(weights.w_s, weights.n_taps))


def fft1_band_map(n_taps: int, K: int) -> tuple[np.ndarray, np.ndarray]:
    """Index map of the band-interleaved stacking: fullband bin l < N/2 is
    taken from bin (l mod 2N/K) of subband floor(l*K/N)."""
    l = np.arange(n_taps // 2)
    return (l * K) // n_taps, l % (2 * n_taps // K)


def stack_fft1(w_k_freq: np.ndarray, n_taps: int) -> np.ndarray:
    """Real fullband FIR from per-subband frequency-domain weights.

    w_k_freq: (K, 2N/K) complex, the FFT of each subband's weight vector.
    Used by the delayless subband LMS baseline.
    """
    w_k_freq = np.asarray(w_k_freq, dtype=complex)
    K = w_k_freq.shape[0]
    if w_k_freq.shape[1] != 2 * n_taps // K:
        raise ConfigurationError(
            f"subband weight spectra must have length 2N/K = {2 * n_taps // K}")
    band, bins = fft1_band_map(n_taps, K)
    half = w_k_freq[band, bins]
    return _real_ifft_checked(hermitian_spectrum(half, n_taps))
