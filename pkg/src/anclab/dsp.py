"""Signal primitives: radix-2 FFT/IFFT, delay lines, FIR filtering, resampling.

Everything runs in float64/complex128.  The FFT is an iterative radix-2
decimation-in-time transform with per-size cached twiddle tables and
bit-reversal permutations; butterflies are vectorised with numpy so the
transform stays fast enough for the per-update real-time budget.
"""

import numpy as np

from .errors import ConfigurationError, InputError

_REV_CACHE: dict[int, np.ndarray] = {}
_TWIDDLE_CACHE: dict[int, list[np.ndarray]] = {}


def _is_pow2(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


def _bit_reversal(n: int) -> np.ndarray:
    rev = _REV_CACHE.get(n)
    if rev is None:
        bits = n.bit_length() - 1
        rev = np.zeros(n, dtype=np.intp)
        for i in range(n):
            r = 0
            v = i
            for _ in range(bits):
                r = (r << 1) | (v & 1)
                v >>= 1
            rev[i] = r
        _REV_CACHE[n] = rev
    return rev


def _twiddles(n: int) -> list[np.ndarray]:
    """One table per stage: exp(-2j*pi*k/m) for k < m/2, m = 2, 4, ..., n."""
    tabs = _TWIDDLE_CACHE.get(n)
    if tabs is None:
        tabs = []
        m = 2
        while m <= n:
            tabs.append(np.exp(-2j * np.pi * np.arange(m // 2) / m))
            m *= 2
        _TWIDDLE_CACHE[n] = tabs
    return tabs


def fft(x, size: int | None = None) -> np.ndarray:
    """Unnormalised DFT along the last axis.

    `size` must be a power of two; inputs shorter than `size` are
    zero-padded.  Accepts real or complex arrays of any leading shape.
    """
    x = np.asarray(x)
    n = int(size) if size is not None else x.shape[-1]
    if not _is_pow2(n):
        raise ConfigurationError(f"fft size must be a power of two, got {n}")
    if x.shape[-1] > n:
        raise ConfigurationError(f"input length {x.shape[-1]} exceeds fft size {n}")
    if x.shape[-1] < n:
        pad = [(0, 0)] * (x.ndim - 1) + [(0, n - x.shape[-1])]
        x = np.pad(x, pad)
    if n == 1:
        return x.astype(np.complex128)
    y = np.ascontiguousarray(x[..., _bit_reversal(n)], dtype=np.complex128)
    lead = y.shape[:-1]
    for tw in _twiddles(n):
        half = tw.shape[0]
        m = 2 * half
        y = y.reshape(lead + (n // m, m))
        even = y[..., :half]
        odd = y[..., half:] * tw
        upper = even - odd
        y[..., :half] += odd
        y[..., half:] = upper
    return y.reshape(lead + (n,))


def ifft(x) -> np.ndarray:
    """Inverse DFT along the last axis with 1/N normalisation."""
    x = np.asarray(x)
    n = x.shape[-1]
    if not _is_pow2(n):
        raise ConfigurationError(f"ifft length must be a power of two, got {n}")
    return np.conj(fft(np.conj(x))) / n


class DelayLine:
    """Fixed-length sample history with O(1) push and contiguous reads.

    Samples are written right-to-left into a doubled buffer so that
    ``window(m, stride)`` is a plain newest-first slice (a view, no copy).
    Unwritten history reads as zero.
    """

    __slots__ = ("length", "_buf", "_pos")

    def __init__(self, length: int):
        if length < 1:
            raise ConfigurationError("delay line length must be >= 1")
        self.length = int(length)
        self._buf = np.zeros(2 * self.length)
        self._pos = self.length

    def push(self, value: float) -> None:
        if self._pos == 0:
            self._buf[self.length:] = self._buf[: self.length]
            self._pos = self.length
        self._pos -= 1
        self._buf[self._pos] = value

    def read(self, lag: int) -> float:
        """Sample `lag` steps in the past; read(0) is the newest sample."""
        if not 0 <= lag < self.length:
            raise ConfigurationError(f"lag {lag} outside history of length {self.length}")
        return float(self._buf[self._pos + lag])

    def window(self, count: int, stride: int = 1) -> np.ndarray:
        """Newest-first view of `count` samples spaced `stride` apart."""
        span = (count - 1) * stride
        if span >= self.length:
            raise ConfigurationError(
                f"window span {span + 1} exceeds history of length {self.length}")
        return self._buf[self._pos : self._pos + span + 1 : stride]

    def clear(self) -> None:
        self._buf[:] = 0.0
        self._pos = self.length


def fir_filter(h, history: DelayLine) -> float:
    """One output sample of the FIR `h` against a delay line: sum h[l]*x(n-l)."""
    h = np.asarray(h, dtype=float)
    if h.shape[0] > history.length:
        raise ConfigurationError(
            f"filter of length {h.shape[0]} exceeds history of length {history.length}")
    return float(np.dot(h, history.window(h.shape[0])))


# ---------------------------------------------------------------------------
# Sample-rate conversion

# Supported source rates mapped to (up, down) factors relative to 16 kHz.
_RATE_FACTORS = {
    8000: (2, 1),
    16000: (1, 1),
    22050: (320, 441),
    44100: (160, 441),
    48000: (1, 3),
}
_TAPS_PER_PHASE = 64
_KAISER_BETA = 8.0
_PHASE_CACHE: dict[int, tuple[np.ndarray, np.ndarray]] = {}


def _kaiser(tau: np.ndarray, half_width: float, beta: float) -> np.ndarray:
    z = np.clip(1.0 - (tau / half_width) ** 2, 0.0, None)
    return np.i0(beta * np.sqrt(z)) / np.i0(beta)


def _phase_tables(src_rate: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-phase windowed-sinc kernels and integer base offsets."""
    cached = _PHASE_CACHE.get(src_rate)
    if cached is not None:
        return cached
    up, down = _RATE_FACTORS[src_rate]
    half = _TAPS_PER_PHASE // 2
    cutoff = min(1.0, up / down)  # in units of the input Nyquist
    kernels = np.empty((up, _TAPS_PER_PHASE))
    bases = np.empty(up, dtype=np.intp)
    for phase in range(up):
        t = phase * down / up  # input-sample time of this output phase
        base = int(np.floor(t))
        frac = t - base
        # tap i covers input sample base - (half - 1) + i
        tau = frac + (half - 1) - np.arange(_TAPS_PER_PHASE)
        kernels[phase] = cutoff * np.sinc(cutoff * tau) * _kaiser(tau, half, _KAISER_BETA)
        bases[phase] = base
    _PHASE_CACHE[src_rate] = (kernels, bases)
    return kernels, bases


def resample_to_16k(x, src_rate: int) -> np.ndarray:
    """Resample `x` to 16 kHz with a Kaiser-windowed polyphase sinc kernel.

    Output length is round(len(x) * 16000 / src_rate).  Raises InputError
    for rates outside the supported set.
    """
    x = np.asarray(x, dtype=float)
    if x.ndim != 1:
        raise InputError("resample_to_16k expects a 1-D signal")
    if src_rate not in _RATE_FACTORS:
        raise InputError(f"unsupported source rate {src_rate}")
    if src_rate == 16000:
        return x.copy()
    up, down = _RATE_FACTORS[src_rate]
    out_len = int(round(x.shape[0] * 16000 / src_rate))
    kernels, bases = _phase_tables(src_rate)
    half = _TAPS_PER_PHASE // 2
    # Pad so every 64-tap window is in range, then gather windows per phase.
    padded = np.concatenate([np.zeros(half - 1), x, np.zeros(half + down + 1)])
    windows = np.lib.stride_tricks.sliding_window_view(padded, _TAPS_PER_PHASE)
    out = np.empty(out_len)
    for phase in range(up):
        idx = np.arange(phase, out_len, up)
        if idx.size == 0:
            continue
        starts = bases[phase] + (idx // up) * down
        out[idx] = windows[starts] @ kernels[phase]
    return out
