"""Physical plant simulation.

Room impulse responses come from the rigid-room image method with a uniform
Eyring reflection coefficient.  The loudspeaker saturation nonlinearity is
the odd function eta * integral_0^{y/eta} exp(u^2/2) du, evaluated through a
precomputed table plus a small-argument series so that a single sample costs
O(1).  PlantState turns a secondary-source sample plus a reference sample
into the error-microphone sample, including measurement noise at a requested
SNR.
"""

import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .dsp import DelayLine
from .errors import ConfigurationError, InputError, InternalInvariantError
from .rng import STREAM_MEASUREMENT, make_rng


@dataclass(frozen=True)
class RoomSpec:
    """Rectangular room with the fixed speaker/mic geometry of one setup."""

    dimensions: tuple[float, float, float]
    source_pos: tuple[float, float, float]
    speaker_pos: tuple[float, float, float]
    error_mic_pos: tuple[float, float, float]
    t60: float
    sound_speed: float = 340.0
    sample_rate: int = 16000

    def __post_init__(self):
        if self.t60 <= 0:
            raise ConfigurationError("t60 must be positive")
        if self.sound_speed <= 0:
            raise ConfigurationError("sound speed must be positive")
        for name in ("source_pos", "speaker_pos", "error_mic_pos"):
            _check_inside(getattr(self, name), self.dimensions, name)


def _check_inside(pos, dims, name):
    for x, limit in zip(pos, dims):
        if not 0.0 < x < limit:
            raise InputError(f"{name} {pos} not strictly inside room {dims}")


@dataclass
class AcousticPath:
    """FIR representation of an acoustic propagation path."""

    taps: np.ndarray

    def __post_init__(self):
        self.taps = np.asarray(self.taps, dtype=float)
        if self.taps.ndim != 1 or self.taps.shape[0] < 1:
            raise ConfigurationError("acoustic path needs at least one tap")
        if not np.all(np.isfinite(self.taps)):
            raise ConfigurationError("acoustic path taps must be finite")

    @property
    def length(self) -> int:
        return self.taps.shape[0]


def eyring_reflection(dimensions, t60: float, sound_speed: float = 340.0) -> float:
    """Uniform wall reflection coefficient that reproduces the given T60."""
    lx, ly, lz = dimensions
    volume = lx * ly * lz
    surface = 2.0 * (lx * ly + lx * lz + ly * lz)
    const = 24.0 * np.log(10.0) / sound_speed
    alpha = 1.0 - np.exp(-const * volume / (surface * t60))
    return float(np.sqrt(1.0 - alpha))


def _axis_images(src: float, size: float, n_max: int):
    n = np.arange(-n_max, n_max + 1)
    coords = []
    counts = []
    for p in (0, 1):
        coords.append((1 - 2 * p) * src + 2.0 * n * size)
        counts.append(np.abs(n - p) + np.abs(n))
    return np.concatenate(coords), np.concatenate(counts)


def image_method_rir(room: RoomSpec, src, mic, length: int,
                     reflection: float | None = None) -> AcousticPath:
    """Image-method RIR from `src` to `mic`, `length` taps at room.sample_rate.

    `reflection` overrides the Eyring coefficient (0.0 gives the free-field
    response: a single 1/(4*pi*d) impulse at the direct delay).
    """
    src = tuple(float(v) for v in src)
    mic = tuple(float(v) for v in mic)
    _check_inside(src, room.dimensions, "source")
    _check_inside(mic, room.dimensions, "microphone")
    if src == mic:
        raise InputError("source and microphone positions coincide")
    fs = room.sample_rate
    c = room.sound_speed
    direct = float(np.linalg.norm(np.subtract(src, mic)))
    if length < int(direct / c * fs):
        raise InputError("RIR length shorter than the direct-path delay")
    refl = eyring_reflection(room.dimensions, room.t60, c) if reflection is None else float(reflection)

    max_dist = c * (length / fs) + max(room.dimensions)
    axes = []
    for axis in range(3):
        size = room.dimensions[axis]
        n_max = int(np.ceil(max_dist / (2.0 * size))) + 1
        coords, counts = _axis_images(src[axis], size, n_max)
        axes.append((coords - mic[axis], counts))

    dx, cx = axes[0]
    dy, cy = axes[1]
    dz, cz = axes[2]
    dist = np.sqrt(dx[:, None, None] ** 2 + dy[None, :, None] ** 2 + dz[None, None, :] ** 2)
    order = cx[:, None, None] + cy[None, :, None] + cz[None, None, :]
    dist = dist.ravel()
    order = order.ravel()

    delays = np.floor(dist / c * fs).astype(np.intp)
    keep = delays < length
    if refl == 0.0:
        keep &= order == 0
    delays, dist, order = delays[keep], dist[keep], order[keep]
    amps = (refl ** order) / (4.0 * np.pi * dist)
    taps = np.zeros(length)
    np.add.at(taps, delays, amps)
    return AcousticPath(taps)


def main_delay_path(path: AcousticPath) -> AcousticPath:
    """Unit-gain pure delay at the peak-magnitude tap of `path`."""
    delay = int(np.argmax(np.abs(path.taps)))
    taps = np.zeros(delay + 1)
    taps[delay] = 1.0
    return AcousticPath(taps)


# ---------------------------------------------------------------------------
# Loudspeaker saturation

_TABLE_SIZE = 1024
_U_MAX = 6.0
_U_SERIES = 0.5
_SERIES_TERMS = 12
_nse_table: np.ndarray | None = None


@dataclass
class SaturationSpec:
    """Saturation config: `finite` with strength eta, or exactly `linear`."""

    eta: float = 1.0
    mode: str = "finite"
    clamp_count: int = 0

    def __post_init__(self):
        if self.mode not in ("finite", "linear"):
            raise ConfigurationError(f"unknown saturation mode {self.mode!r}")
        if self.mode == "finite" and not self.eta > 0:
            raise ConfigurationError("finite saturation requires eta > 0")


def _adaptive_simpson(f, a: float, b: float, tol: float) -> float:
    fa, fb = f(a), f(b)
    m = 0.5 * (a + b)
    fm = f(m)
    whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb)

    def recurse(a, b, fa, fb, fm, whole, tol):
        m = 0.5 * (a + b)
        lm, rm = 0.5 * (a + m), 0.5 * (m + b)
        flm, frm = f(lm), f(rm)
        left = (m - a) / 6.0 * (fa + 4.0 * flm + fm)
        right = (b - m) / 6.0 * (fm + 4.0 * frm + fb)
        if abs(left + right - whole) <= 15.0 * tol * max(1.0, abs(left + right)):
            return left + right + (left + right - whole) / 15.0
        return (recurse(a, m, fa, fm, flm, left, tol / 2)
                + recurse(m, b, fm, fb, frm, right, tol / 2))

    return recurse(a, b, fa, fb, fm, whole, tol)


def _build_table() -> np.ndarray:
    """Scaled integral exp(-u^2/2) * integral_0^u exp(t^2/2) dt on [0, 6].

    The scaled form stays O(1) across the whole range, so cubic interpolation
    keeps the relative error of the reconstructed integral below 1e-8 with
    1024 entries; the raw integral spans seven decades and would not.
    """
    grid = np.linspace(0.0, _U_MAX, _TABLE_SIZE)
    integrand = lambda t: np.exp(0.5 * t * t)
    acc = np.zeros(_TABLE_SIZE)
    for i in range(1, _TABLE_SIZE):
        acc[i] = acc[i - 1] + _adaptive_simpson(integrand, grid[i - 1], grid[i], 1e-12)
    return acc * np.exp(-0.5 * grid * grid)


def _table() -> np.ndarray:
    global _nse_table
    if _nse_table is None:
        _nse_table = _build_table()
    return _nse_table


def _series(u: np.ndarray) -> np.ndarray:
    """integral_0^u exp(t^2/2) dt as u * sum u^{2k} / ((2k+1) 2^k k!)."""
    u2 = u * u
    acc = np.zeros_like(u)
    for k in range(_SERIES_TERMS - 1, -1, -1):
        coef = 1.0 / ((2 * k + 1) * (2.0 ** k) * float(math.factorial(k)))
        acc = acc * u2 + coef
    return u * acc


def _cubic_table_eval(u: np.ndarray) -> np.ndarray:
    """4-point Lagrange interpolation of the scaled-integral table."""
    tab = _table()
    h = _U_MAX / (_TABLE_SIZE - 1)
    pos = u / h
    j = np.clip(np.floor(pos).astype(np.intp), 1, _TABLE_SIZE - 3)
    s = pos - j
    wm1 = -s * (s - 1.0) * (s - 2.0) / 6.0
    w0 = (s + 1.0) * (s - 1.0) * (s - 2.0) / 2.0
    w1 = -s * (s + 1.0) * (s - 2.0) / 2.0
    w2 = s * (s + 1.0) * (s - 1.0) / 6.0
    d = wm1 * tab[j - 1] + w0 * tab[j] + w1 * tab[j + 1] + w2 * tab[j + 2]
    return d * np.exp(0.5 * u * u)


def nse_value(y, eta) -> np.ndarray:
    """eta * integral_0^{|y|/eta} exp(u^2/2) du, signed; clamped at |y| = 6*eta.

    eta may be an array (np.inf rows degenerate to the identity).
    """
    y = np.asarray(y, dtype=float)
    eta = np.asarray(eta, dtype=float)
    with np.errstate(invalid="ignore"):
        u = np.where(np.isinf(eta), 0.0, np.abs(y) / eta)
    u = np.minimum(u, _U_MAX)
    small = u <= _U_SERIES
    integral = np.where(small, _series(u), _cubic_table_eval(np.where(small, _U_SERIES, u)))
    with np.errstate(invalid="ignore"):
        out = np.sign(y) * eta * integral
    return np.where(np.isinf(eta), y, out)


def nse_slope(y, eta) -> np.ndarray:
    """d/dy of nse_value: exp(y^2 / (2 eta^2)) inside the clamp, 0 beyond."""
    y = np.asarray(y, dtype=float)
    eta = np.asarray(eta, dtype=float)
    with np.errstate(invalid="ignore"):
        u = np.where(np.isinf(eta), 0.0, np.abs(y) / eta)
    slope = np.exp(0.5 * np.minimum(u, _U_MAX) ** 2)
    return np.where(u > _U_MAX, 0.0, slope)


def nse_clamped(y, eta) -> np.ndarray:
    return np.abs(np.asarray(y, dtype=float)) > _U_MAX * np.asarray(eta, dtype=float)


def saturate(y: float, spec: SaturationSpec) -> float:
    """Loudspeaker saturation of one sample under `spec`."""
    if spec.mode == "linear":
        return float(y)
    if abs(y) > _U_MAX * spec.eta:
        spec.clamp_count += 1
    return float(nse_value(y, spec.eta))


# ---------------------------------------------------------------------------
# Plant

@dataclass
class PlantState:
    """Single-owner mutable state producing error-microphone samples."""

    primary: AcousticPath
    secondary: AcousticPath
    saturation: SaturationSpec
    noise_snr_db: float | None
    x_history: DelayLine
    y_history: DelayLine
    rng_seed: int
    noise_sigma: float = 0.0
    switch_to: AcousticPath | None = None
    switch_at: int = -1
    cursor: int = 0
    d_record: list = field(default_factory=list)
    yp_record: list = field(default_factory=list)
    e_record: list = field(default_factory=list)
    _rng: np.random.Generator | None = None

    def __post_init__(self):
        if self.x_history.length < self.primary.length:
            raise ConfigurationError("x history shorter than the primary path")
        if self.switch_to is not None and self.x_history.length < self.switch_to.length:
            raise ConfigurationError("x history shorter than the switched primary path")
        if self.y_history.length < self.secondary.length:
            raise ConfigurationError("y history shorter than the secondary path")
        if self._rng is None:
            self._rng = make_rng(self.rng_seed, STREAM_MEASUREMENT)


def desired_signal(primary: AcousticPath, x: np.ndarray,
                   switch_to: AcousticPath | None = None, switch_at: int = -1) -> np.ndarray:
    """d(n) = (p * x)(n), with an optional primary-path change at `switch_at`."""
    d = np.convolve(x, primary.taps)[: x.shape[0]]
    if switch_to is not None and 0 <= switch_at < x.shape[0]:
        d2 = np.convolve(x, switch_to.taps)[: x.shape[0]]
        d[switch_at:] = d2[switch_at:]
    return d


def make_plant(primary: AcousticPath, secondary: AcousticPath, saturation: SaturationSpec,
               noise_snr_db: float | None, x_ref: np.ndarray, seed: int,
               switch_to: AcousticPath | None = None, switch_at: int = -1) -> PlantState:
    """Plant for one episode whose reference signal is known up front.

    The measurement-noise power is fixed from the whole episode's desired
    signal so that 10*log10(P_d / P_v) equals `noise_snr_db`.
    """
    x_ref = np.asarray(x_ref, dtype=float)
    hist_len = max(primary.length, secondary.length,
                   switch_to.length if switch_to is not None else 1)
    state = PlantState(
        primary=primary, secondary=secondary, saturation=saturation,
        noise_snr_db=noise_snr_db,
        x_history=DelayLine(hist_len), y_history=DelayLine(hist_len),
        rng_seed=seed, switch_to=switch_to, switch_at=switch_at)
    if noise_snr_db is not None:
        d = desired_signal(primary, x_ref, switch_to, switch_at)
        p_d = float(np.mean(d * d))
        if p_d == 0.0:
            raise InputError("cannot set an SNR against a zero-power desired signal")
        state.noise_sigma = float(np.sqrt(p_d * 10.0 ** (-noise_snr_db / 10.0)))
    return state


def plant_step(state: PlantState, y_n: float, x_n: float) -> float:
    """Advance one sample: push x(n) and f[y(n)], return e(n) = d + y' + v."""
    if state.cursor == state.switch_at and state.switch_to is not None:
        state.primary = state.switch_to
    state.x_history.push(x_n)
    state.y_history.push(saturate(y_n, state.saturation))
    d = float(np.dot(state.primary.taps, state.x_history.window(state.primary.length)))
    y_prime = float(np.dot(state.secondary.taps, state.y_history.window(state.secondary.length)))
    v = state.noise_sigma * float(state._rng.standard_normal()) if state.noise_sigma else 0.0
    e = d + y_prime + v
    state.d_record.append(d)
    state.yp_record.append(y_prime)
    state.e_record.append(e)
    state.cursor += 1
    return e


def filtered_reference(state: PlantState, estimate: AcousticPath) -> float:
    """x_f(n): the reference history filtered by the secondary-path estimate."""
    if estimate.length > state.x_history.length:
        raise ConfigurationError("estimate longer than the reference history")
    return float(np.dot(estimate.taps, state.x_history.window(estimate.length)))


@dataclass
class EpisodeTrace:
    """Per-sample record of one simulation run."""

    x: np.ndarray
    d: np.ndarray
    y: np.ndarray
    y_prime: np.ndarray
    e: np.ndarray
    sample_rate: int = 16000

    def __post_init__(self):
        n = self.x.shape[0]
        for name in ("d", "y", "y_prime", "e"):
            if getattr(self, name).shape[0] != n:
                raise InternalInvariantError("trace arrays must have equal lengths")


# ---------------------------------------------------------------------------
# External interfaces: RIR cache files and WAV input

_RIR_MAGIC = b"ANCR"
_RIR_VERSION = 1


def write_rir(path, rir: AcousticPath, sample_rate: int) -> None:
    """Flat little-endian cache: magic, version, length, rate, float64 taps."""
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sIII", _RIR_MAGIC, _RIR_VERSION, rir.length, sample_rate))
        fh.write(rir.taps.astype("<f8").tobytes())


def read_rir(path) -> tuple[AcousticPath, int]:
    with open(path, "rb") as fh:
        header = fh.read(16)
        if len(header) != 16:
            raise InputError(f"truncated RIR file {path}")
        magic, version, length, rate = struct.unpack("<4sIII", header)
        if magic != _RIR_MAGIC:
            raise InputError(f"{path} is not a RIR cache file")
        if version != _RIR_VERSION:
            raise InputError(f"unsupported RIR cache version {version}")
        data = np.frombuffer(fh.read(8 * length), dtype="<f8")
        if data.shape[0] != length:
            raise InputError(f"truncated RIR payload in {path}")
    return AcousticPath(data.copy()), int(rate)


def read_wav_mono(path) -> tuple[np.ndarray, int]:
    """Mono WAV, 16-bit PCM or float32, as float64 samples plus sample rate."""
    with open(path, "rb") as fh:
        riff = fh.read(12)
        if len(riff) != 12 or riff[:4] != b"RIFF" or riff[8:] != b"WAVE":
            raise InputError(f"{path} is not a WAV file")
        fmt = None
        data = None
        while True:
            head = fh.read(8)
            if len(head) < 8:
                break
            chunk_id, size = struct.unpack("<4sI", head)
            payload = fh.read(size + (size & 1))[:size]
            if chunk_id == b"fmt ":
                fmt = struct.unpack("<HHIIHH", payload[:16])
            elif chunk_id == b"data":
                data = payload
        if fmt is None or data is None:
            raise InputError(f"{path} misses fmt or data chunk")
    audio_format, channels, rate, _, _, bits = fmt
    if channels != 1:
        raise InputError(f"{path}: only mono WAV is supported, got {channels} channels")
    if audio_format == 1 and bits == 16:
        samples = np.frombuffer(data, dtype="<i2").astype(float) / 32768.0
    elif audio_format == 3 and bits == 32:
        samples = np.frombuffer(data, dtype="<f4").astype(float)
    else:
        raise InputError(f"{path}: unsupported WAV encoding (format {audio_format}, {bits} bits)")
    return samples, int(rate)
