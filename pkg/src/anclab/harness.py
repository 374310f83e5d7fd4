"""Evaluation harness: scenario generation, the controller-agnostic episode
runner with skip updating, NMSE/PSD metrics, dataset manifests, and the
real-time budget measurement.
"""

import hashlib
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import dsp
from .acoustics import (AcousticPath, EpisodeTrace, RoomSpec, SaturationSpec,
                        filtered_reference, image_method_rir, main_delay_path,
                        make_plant, plant_step, read_rir, read_wav_mono, write_rir)
from .baselines import (AdaptiveFilterState, SubbandLmsState, dsnfxlms_fullband,
                        dsnfxlms_update, nfxlms_update, subband_nlms_gradient)
from .errors import ConfigurationError, InputError
from .filterbank import FilterBank, SubbandWeights, stack_direct, subband_analyze, subband_features
from .model import ModelDims, ModelParams, forward
from .rng import STREAM_NOISE, make_rng
from .trainer import Episode, variant_features

PSD_DB_FLOOR = -200.0


@dataclass
class Scenario:
    """One evaluation condition."""

    noise: str
    duration_s: float
    primary: AcousticPath
    secondary: AcousticPath
    snr_db: float | None = None
    eta: float | None = None  # None selects the linear loudspeaker
    primary_after: AcousticPath | None = None
    skip_factor: int = 0
    runs: int = 1
    seed: int = 0
    n_taps: int = 1024
    subbands: int = 32

    def __post_init__(self):
        if self.duration_s <= 0:
            raise ConfigurationError("duration must be positive")
        if self.runs < 1:
            raise ConfigurationError("runs must be >= 1")
        if self.skip_factor < 0:
            raise ConfigurationError("skip factor must be >= 0")

    def digest(self) -> str:
        payload = {
            "noise": str(self.noise), "duration_s": self.duration_s,
            "snr_db": self.snr_db, "eta": self.eta,
            "primary": hashlib.sha256(self.primary.taps.tobytes()).hexdigest(),
            "secondary": hashlib.sha256(self.secondary.taps.tobytes()).hexdigest(),
            "primary_after": hashlib.sha256(self.primary_after.taps.tobytes()).hexdigest()
            if self.primary_after is not None else None,
            "skip_factor": self.skip_factor, "runs": self.runs, "seed": self.seed,
            "n_taps": self.n_taps, "subbands": self.subbands,
        }
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]


def _run_seed(seed: int, run: int) -> int:
    return seed * 100003 + run


def synthesize_noise(spec: str, n_samples: int, sample_rate: int,
                     rng: np.random.Generator) -> np.ndarray:
    """Reference noise for one run: 'tone:FREQ', 'band:LO:HI', 'white', or a
    WAV path (auto-resampled to 16 kHz, random clip offset).  Unit RMS."""
    if spec.startswith("tone:"):
        freq = float(spec.split(":")[1])
        phase = rng.uniform(0.0, 2.0 * np.pi)
        t = np.arange(n_samples) / sample_rate
        x = np.sin(2.0 * np.pi * freq * t + phase)
    elif spec.startswith("band:"):
        _, lo, hi = spec.split(":")
        x = band_limited_noise(float(lo), float(hi), n_samples, sample_rate, rng)
    elif spec == "white":
        x = rng.standard_normal(n_samples)
    else:
        raw, rate = read_wav_mono(spec)
        raw = dsp.resample_to_16k(raw, rate)
        if raw.shape[0] < n_samples:
            reps = int(np.ceil(n_samples / raw.shape[0]))
            raw = np.tile(raw, reps)
        offset = int(rng.integers(0, max(1, raw.shape[0] - n_samples + 1)))
        x = raw[offset : offset + n_samples]
    rms = float(np.sqrt(np.mean(x * x)))
    if rms == 0.0:
        raise InputError(f"noise source {spec!r} produced a silent signal")
    return x / rms


def band_limited_noise(lo_hz: float, hi_hz: float, n_samples: int,
                       sample_rate: int, rng: np.random.Generator) -> np.ndarray:
    """White noise band-limited with a frequency-domain raised-cosine mask."""
    size = 1
    while size < n_samples:
        size *= 2
    spec = dsp.fft(rng.standard_normal(size))
    freqs = np.arange(size) * sample_rate / size
    freqs = np.minimum(freqs, sample_rate - freqs)
    edge = 0.05 * (hi_hz - lo_hz)
    mask = np.clip((freqs - (lo_hz - edge)) / edge, 0.0, 1.0) \
        * np.clip(((hi_hz + edge) - freqs) / edge, 0.0, 1.0)
    x = dsp.ifft(spec * mask).real[:n_samples]
    return x


# ---------------------------------------------------------------------------
# Controllers

class NfxlmsController:
    """Per-sample normalised FxLMS; mu = 0 freezes the filter."""

    controller_id = "nfxlms"
    uses_instants = False

    def __init__(self, n_taps: int, mu: float = 0.01, epsilon: float = 1e-8,
                 variant: str = "whole-path"):
        self.n_taps = n_taps
        self.mu = mu
        self.epsilon = epsilon
        self.variant = variant
        self.state = AdaptiveFilterState(n_taps=n_taps, mu=mu, epsilon=epsilon)

    @property
    def w(self) -> np.ndarray:
        return self.state.w

    def s_hat(self, secondary: AcousticPath) -> AcousticPath:
        return AcousticPath(variant_features(self.variant, secondary.taps))

    def reset(self) -> None:
        self.state = AdaptiveFilterState(n_taps=self.n_taps, mu=self.mu,
                                         epsilon=self.epsilon)

    def observe(self, n: int, xf_hist: dsp.DelayLine, e_hist: dsp.DelayLine,
                e_n: float, timings: list) -> None:
        t0 = time.perf_counter()
        nfxlms_update(self.state, xf_hist.window(self.n_taps), e_n)
        timings.append((time.perf_counter() - t0) * 1e3)


class _SubbandController:
    """Shared machinery for controllers updating every D samples.

    Scheduled instants are every D samples; with skip factor B only every
    (B+1)-th scheduled instant executes an update.  The subband signal
    history still advances at every scheduled instant.
    """

    uses_instants = True

    def __init__(self, n_taps: int, subbands: int, skip_factor: int = 0,
                 disable_skip_logic: bool = False):
        self.n_taps = n_taps
        self.bank = FilterBank.design(n_taps, subbands)
        self.skip_factor = skip_factor
        self._no_skip = disable_skip_logic
        self.scheduled_count = 0
        self.executed_count = 0
        self.w = np.zeros(n_taps)
        self._x_ring = np.zeros((self.bank.K, self.bank.Q), dtype=complex)

    def reset(self) -> None:
        self.scheduled_count = 0
        self.executed_count = 0
        self.w = np.zeros(self.n_taps)
        self._x_ring = np.zeros((self.bank.K, self.bank.Q), dtype=complex)
        self._reset_state()

    def s_hat(self, secondary: AcousticPath) -> AcousticPath:
        return AcousticPath(variant_features(self.variant, secondary.taps))

    def observe(self, n: int, xf_hist: dsp.DelayLine, e_hist: dsp.DelayLine,
                e_n: float, timings: list) -> None:
        if n % self.bank.D:
            return
        instant = self.scheduled_count
        self.scheduled_count += 1
        t0 = time.perf_counter()
        x_fk, e_k = subband_analyze(self.bank, xf_hist, e_hist)
        self._x_ring[:, 1:] = self._x_ring[:, :-1]
        self._x_ring[:, 0] = x_fk
        if self._no_skip:
            executed = True
        else:
            executed = instant % (self.skip_factor + 1) == 0
        if not executed:
            return
        self.executed_count += 1
        self._update(e_k)
        timings.append((time.perf_counter() - t0) * 1e3)


class DsnfxlmsController(_SubbandController):
    """Delayless subband NFxLMS with band-interleaved frequency stacking."""

    controller_id = "dsnfxlms"
    variant = "whole-path"

    def __init__(self, n_taps: int, subbands: int, mu: float = 0.01,
                 epsilon: float = 1e-8, skip_factor: int = 0,
                 disable_skip_logic: bool = False):
        super().__init__(n_taps, subbands, skip_factor, disable_skip_logic)
        self.mu = mu
        self.epsilon = epsilon
        self._reset_state()

    def _reset_state(self) -> None:
        self.state = SubbandLmsState(bank=self.bank, mu=self.mu, epsilon=self.epsilon)

    def _update(self, e_k: np.ndarray) -> None:
        dsnfxlms_update(self.state, self._x_ring, e_k)
        self.w = dsnfxlms_fullband(self.state)


class MdsafController(_SubbandController):
    """The learned update rule driving half-spectrum weights directly."""

    variant = "whole-path"

    def __init__(self, params: ModelParams, mu: float = 0.4, skip_factor: int = 0,
                 variant: str = "whole-path", disable_skip_logic: bool = False):
        dims = params.dims
        super().__init__(dims.n_taps, dims.subbands, skip_factor, disable_skip_logic)
        self.params = params
        self.dims = dims
        self.mu = mu
        self.variant = variant
        self.controller_id = "mdsaf" if variant == "whole-path" else "mdsaf-md"
        self._reset_state()

    def _reset_state(self) -> None:
        self.weights = SubbandWeights.zeros(self.n_taps)
        self.hidden = np.zeros(self.dims.hidden)

    def _update(self, e_k: np.ndarray) -> None:
        bands = self.dims.bands
        frame = subband_features(self.bank, self._x_ring[:bands], e_k[:bands])
        g, self.hidden = forward(self.params, frame, self.hidden)
        self.weights.w_s -= self.mu * g
        self.w = stack_direct(self.weights)


class OracleSubbandController(_SubbandController):
    """MDSAF plumbing with the network replaced by the complex subband NLMS
    gradient; must reproduce DsnfxlmsController exactly."""

    controller_id = "oracle"
    variant = "whole-path"

    def __init__(self, n_taps: int, subbands: int, mu: float = 0.01,
                 epsilon: float = 1e-8, skip_factor: int = 0,
                 disable_skip_logic: bool = False):
        super().__init__(n_taps, subbands, skip_factor, disable_skip_logic)
        self.mu = mu
        self.epsilon = epsilon
        self._reset_state()

    def _reset_state(self) -> None:
        self.weights = SubbandWeights.zeros(self.n_taps)

    def _update(self, e_k: np.ndarray) -> None:
        bands = self.bank.used_bands
        g = subband_nlms_gradient(self._x_ring[:bands], e_k[:bands],
                                  self.epsilon, self.n_taps, self.bank.K)
        self.weights.w_s -= self.mu * g
        self.w = stack_direct(self.weights)


def build_controller(name: str, scenario: Scenario, checkpoint: ModelParams | None = None,
                     mu: float | None = None, disable_skip_logic: bool = False):
    """Controller factory used by the CLI and tests."""
    name = name.lower()
    if name == "nfxlms":
        return NfxlmsController(scenario.n_taps, mu=0.01 if mu is None else mu)
    if name == "dsnfxlms":
        return DsnfxlmsController(scenario.n_taps, scenario.subbands,
                                  mu=0.01 if mu is None else mu,
                                  skip_factor=scenario.skip_factor,
                                  disable_skip_logic=disable_skip_logic)
    if name in ("mdsaf", "mdsaf-md"):
        if checkpoint is None:
            raise ConfigurationError(f"controller {name} needs a checkpoint")
        variant = "whole-path" if name == "mdsaf" else "main-delay"
        return MdsafController(checkpoint, mu=0.4 if mu is None else mu,
                               skip_factor=scenario.skip_factor, variant=variant,
                               disable_skip_logic=disable_skip_logic)
    raise InputError(f"unknown controller {name!r}")


# ---------------------------------------------------------------------------
# Metrics

@dataclass
class MetricsRecord:
    """NMSE and PSD summary of one scenario/controller evaluation."""

    controller_id: str
    scenario_digest: str
    nmse_db: float
    nmse_db_runs: list
    nmse_curve: np.ndarray  # (windows, 2): sample index, dB
    psd_hz: np.ndarray
    psd_off_db: np.ndarray
    psd_on_db: np.ndarray


@dataclass
class TimingReport:
    """Per-update wall-clock statistics against the relaxed budget."""

    median_ms: float
    mean_ms: float
    max_ms: float
    count: int
    budget_ms: float
    satisfied: bool
    scheduled_updates: int = 0
    executed_updates: int = 0


def nmse(e_power: np.ndarray, d_power: np.ndarray) -> float:
    """10 log10 of summed error power over summed desired power."""
    denom = float(np.sum(d_power))
    if denom <= 0.0:
        raise InputError("desired signal has zero power")
    return float(10.0 * np.log10(np.sum(e_power) / denom))


def nmse_trace(trace: EpisodeTrace) -> float:
    return nmse(trace.e ** 2, trace.d ** 2)


def nmse_curve(e_power: np.ndarray, d_power: np.ndarray, window: int) -> np.ndarray:
    """Windowed NMSE over time: rows of (window-end sample index, dB)."""
    n = e_power.shape[0] // window
    rows = []
    for i in range(n):
        sl = slice(i * window, (i + 1) * window)
        rows.append(((i + 1) * window,
                     10.0 * np.log10(np.sum(e_power[sl]) / max(np.sum(d_power[sl]), 1e-300))))
    return np.asarray(rows)


def psd(signal: np.ndarray, window: int = 1024, overlap: float = 0.5,
        sample_rate: int = 16000) -> tuple[np.ndarray, np.ndarray]:
    """Welch PSD, Hann window, one-sided, in dB re full scale (floor -200)."""
    if window < 2 or window & (window - 1):
        raise ConfigurationError("PSD window must be a power of two")
    signal = np.asarray(signal, dtype=float)
    if signal.shape[0] < window:
        raise InputError("signal shorter than the PSD window")
    hop = max(1, int(window * (1.0 - overlap)))
    taper = np.hanning(window)
    norm = sample_rate * float(np.sum(taper * taper))
    count = 1 + (signal.shape[0] - window) // hop
    acc = np.zeros(window // 2 + 1)
    for i in range(count):
        seg = signal[i * hop : i * hop + window] * taper
        spec = dsp.fft(seg)[: window // 2 + 1]
        p = (spec.real ** 2 + spec.imag ** 2) / norm
        p[1:-1] *= 2.0
        acc += p
    acc /= count
    freqs = np.arange(window // 2 + 1) * sample_rate / window
    with np.errstate(divide="ignore"):
        db = 10.0 * np.log10(acc)
    return freqs, np.maximum(db, PSD_DB_FLOOR)


# ---------------------------------------------------------------------------
# Episode runner

def run_episode(controller, scenario: Scenario, collect_psd: bool = True,
                curve_window: int = 2000, sample_rate: int = 16000):
    """Run `scenario` under `controller` for R reseeded runs.

    Returns (EpisodeTrace of the last run, MetricsRecord, TimingReport).
    Scheduled update instants fall every D samples; with skip factor B only
    every (B+1)-th executes.  The metric denominator uses the noise-free
    desired signal.
    """
    n_samples = int(round(scenario.duration_s * sample_rate))
    n_taps = scenario.n_taps
    mean_e2 = np.zeros(n_samples)
    mean_d2 = np.zeros(n_samples)
    per_run_nmse = []
    timings: list = []
    psd_off_acc = None
    psd_on_acc = None
    trace = None
    sat = SaturationSpec(mode="linear") if scenario.eta is None else \
        SaturationSpec(eta=scenario.eta, mode="finite")

    for run in range(scenario.runs):
        seed = _run_seed(scenario.seed, run)
        x = synthesize_noise(str(scenario.noise), n_samples, sample_rate,
                             make_rng(seed, STREAM_NOISE))
        switch_at = n_samples // 2 if scenario.primary_after is not None else -1
        plant = make_plant(scenario.primary, scenario.secondary, sat,
                           scenario.snr_db, x, seed,
                           switch_to=scenario.primary_after, switch_at=switch_at)
        controller.reset()
        s_hat = controller.s_hat(scenario.secondary)
        x_hist = dsp.DelayLine(n_taps)
        xf_hist = dsp.DelayLine(n_taps)
        e_hist = dsp.DelayLine(n_taps)
        y_out = np.empty(n_samples)
        w = controller.w
        for n in range(n_samples):
            x_hist.push(x[n])
            y = float(np.dot(controller.w, x_hist.window(n_taps)))
            y_out[n] = y
            e = plant_step(plant, y, x[n])
            xf_hist.push(filtered_reference(plant, s_hat))
            e_hist.push(e)
            controller.observe(n, xf_hist, e_hist, e, timings)
        d = np.asarray(plant.d_record)
        e_arr = np.asarray(plant.e_record)
        yp = np.asarray(plant.yp_record)
        mean_e2 += e_arr ** 2 / scenario.runs
        mean_d2 += d ** 2 / scenario.runs
        per_run_nmse.append(nmse(e_arr ** 2, d ** 2))
        if collect_psd and n_samples >= 1024:
            freqs, off_db = psd(e_arr - yp, sample_rate=sample_rate)
            _, on_db = psd(e_arr, sample_rate=sample_rate)
            off_lin = 10.0 ** (off_db / 10.0)
            on_lin = 10.0 ** (on_db / 10.0)
            psd_off_acc = off_lin if psd_off_acc is None else psd_off_acc + off_lin
            psd_on_acc = on_lin if psd_on_acc is None else psd_on_acc + on_lin
        trace = EpisodeTrace(x=x, d=d, y=y_out, y_prime=yp, e=e_arr,
                             sample_rate=sample_rate)

    if psd_off_acc is not None:
        freqs_out = freqs
        psd_off = np.maximum(10.0 * np.log10(psd_off_acc / scenario.runs), PSD_DB_FLOOR)
        psd_on = np.maximum(10.0 * np.log10(psd_on_acc / scenario.runs), PSD_DB_FLOOR)
    else:
        freqs_out = np.zeros(0)
        psd_off = np.zeros(0)
        psd_on = np.zeros(0)

    metrics = MetricsRecord(
        controller_id=getattr(controller, "controller_id", "unknown"),
        scenario_digest=scenario.digest(),
        nmse_db=nmse(mean_e2, mean_d2),
        nmse_db_runs=per_run_nmse,
        nmse_curve=nmse_curve(mean_e2, mean_d2, curve_window),
        psd_hz=freqs_out, psd_off_db=psd_off, psd_on_db=psd_on)

    times = np.asarray(timings) if timings else np.zeros(1)
    decim = getattr(controller, "bank", None)
    d_factor = decim.D if decim is not None else 1
    b = getattr(controller, "skip_factor", 0)
    budget_ms = (b + 1) * d_factor / sample_rate * 1e3
    timing = TimingReport(
        median_ms=float(np.median(times)), mean_ms=float(np.mean(times)),
        max_ms=float(np.max(times)), count=len(timings), budget_ms=budget_ms,
        satisfied=bool(np.median(times) < budget_ms),
        scheduled_updates=getattr(controller, "scheduled_count", 0),
        executed_updates=getattr(controller, "executed_count",
                                 len(timings) // max(scenario.runs, 1)))
    return trace, metrics, timing


def measure_update_time(controller, iterations: int = 200,
                        sample_rate: int = 16000, seed: int = 0) -> TimingReport:
    """Wall-clock per executed update (analysis + rule + stacking) against
    the relaxed budget (B+1) * D / f_s."""
    if iterations < 100:
        raise ConfigurationError("timing measurement needs at least 100 iterations")
    if not controller.uses_instants:
        raise ConfigurationError("update timing is defined for subband controllers")
    bank = controller.bank
    rng = make_rng(seed, STREAM_NOISE)
    xf_hist = dsp.DelayLine(controller.n_taps)
    e_hist = dsp.DelayLine(controller.n_taps)
    for v in rng.standard_normal(controller.n_taps):
        xf_hist.push(v)
    for v in rng.standard_normal(controller.n_taps):
        e_hist.push(v)
    controller.reset()
    times = []
    scratch: list = []
    for i in range(iterations):
        xf_hist.push(float(rng.standard_normal()))
        e_hist.push(float(rng.standard_normal()))
        t0 = time.perf_counter()
        x_fk, e_k = subband_analyze(bank, xf_hist, e_hist)
        controller._x_ring[:, 1:] = controller._x_ring[:, :-1]
        controller._x_ring[:, 0] = x_fk
        controller._update(e_k)
        times.append((time.perf_counter() - t0) * 1e3)
        scratch.append(controller.w[0])
    times_arr = np.asarray(times)
    b = getattr(controller, "skip_factor", 0)
    budget_ms = (b + 1) * bank.D / sample_rate * 1e3
    return TimingReport(
        median_ms=float(np.median(times_arr)), mean_ms=float(np.mean(times_arr)),
        max_ms=float(np.max(times_arr)), count=iterations, budget_ms=budget_ms,
        satisfied=bool(np.median(times_arr) < budget_ms))


# ---------------------------------------------------------------------------
# Rooms, datasets

PAPER_ROOM = dict(dimensions=(5.0, 4.0, 3.0), speaker=(3.0, 2.0, 1.5),
                  error_mic=(3.5, 2.0, 1.5), cube_center=(1.0, 2.0, 1.5),
                  cube_edge=1.0, t60=0.15, sound_speed=340.0)


def reference_positions(center=(1.0, 2.0, 1.5), edge: float = 1.0) -> list:
    """The nine noise-source positions: cube vertices plus its center."""
    h = edge / 2.0
    out = [tuple(center)]
    for sx in (-h, h):
        for sy in (-h, h):
            for sz in (-h, h):
                out.append((center[0] + sx, center[1] + sy, center[2] + sz))
    return out


def generate_room_rirs(out_dir, primary_len: int = 2048, secondary_len: int = 1024,
                       room: dict | None = None, sample_rate: int = 16000) -> dict:
    """Write the nine primary RIRs plus the secondary RIR as cache files."""
    cfg = dict(PAPER_ROOM)
    if room:
        cfg.update(room)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    spec = RoomSpec(dimensions=tuple(cfg["dimensions"]),
                    source_pos=tuple(cfg["cube_center"]),
                    speaker_pos=tuple(cfg["speaker"]),
                    error_mic_pos=tuple(cfg["error_mic"]),
                    t60=cfg["t60"], sound_speed=cfg["sound_speed"],
                    sample_rate=sample_rate)
    index = {"sample_rate": sample_rate, "primary": [], "secondary": "secondary.rir",
             "room": cfg}
    for i, pos in enumerate(reference_positions(cfg["cube_center"], cfg["cube_edge"])):
        rir = image_method_rir(spec, pos, cfg["error_mic"], primary_len)
        name = f"primary_pos{i}.rir"
        write_rir(out_dir / name, rir, sample_rate)
        index["primary"].append(name)
    secondary = image_method_rir(spec, cfg["speaker"], cfg["error_mic"], secondary_len)
    write_rir(out_dir / "secondary.rir", secondary, sample_rate)
    with open(out_dir / "index.json", "w") as fh:
        json.dump(index, fh, indent=2)
    return index


def make_dataset(corpus_dir, snr_set, eta_set, clip_seconds: float, count: int,
                 seed: int, rir_dir=None, out_path=None,
                 sample_rate: int = 16000) -> dict:
    """Deterministic episode manifest pairing corpus clips with positions,
    SNRs, saturation strengths and seeds; 90/10 train/validation split."""
    corpus_dir = Path(corpus_dir)
    wavs = sorted(p.name for p in corpus_dir.glob("*.wav"))
    if not wavs:
        raise InputError(f"no WAV files found in {corpus_dir}")
    if count < 1:
        raise InputError("dataset needs at least one episode")
    rng = make_rng(seed, 0x2001)
    eta_values = [None if (e is None or np.isinf(e)) else float(e) for e in eta_set]
    episodes = []
    for i in range(count):
        episodes.append({
            "id": i,
            "clip": wavs[int(rng.integers(0, len(wavs)))],
            "offset_s": float(rng.uniform(0.0, 30.0)),
            "position_index": int(rng.integers(0, 9)),
            "snr_db": float(snr_set[int(rng.integers(0, len(snr_set)))]),
            "eta": eta_values[int(rng.integers(0, len(eta_values)))],
            "seed": int(rng.integers(0, 2 ** 31 - 1)),
            "split": "train",
        })
    n_val = count // 10
    val_ids = set(int(i) for i in rng.choice(count, size=n_val, replace=False)) if n_val else set()
    for ep in episodes:
        if ep["id"] in val_ids:
            ep["split"] = "val"
    manifest = {
        "seed": seed, "sample_rate": sample_rate, "clip_seconds": clip_seconds,
        "corpus_dir": str(corpus_dir), "rir_dir": str(rir_dir) if rir_dir else None,
        "count": count, "train": sum(ep["split"] == "train" for ep in episodes),
        "val": sum(ep["split"] == "val" for ep in episodes),
        "episodes": episodes,
    }
    if out_path is not None:
        with open(out_path, "w") as fh:
            json.dump(manifest, fh, indent=2)
    return manifest


def materialize_episode(entry: dict, manifest: dict) -> Episode:
    """Load one manifest entry into a trainer Episode."""
    corpus = Path(manifest["corpus_dir"])
    rir_dir = manifest.get("rir_dir")
    if rir_dir is None:
        raise InputError("manifest has no RIR directory")
    rir_dir = Path(rir_dir)
    with open(rir_dir / "index.json") as fh:
        index = json.load(fh)
    raw, rate = read_wav_mono(corpus / entry["clip"])
    raw = dsp.resample_to_16k(raw, rate)
    n = int(round(manifest["clip_seconds"] * manifest["sample_rate"]))
    if raw.shape[0] < n:
        raw = np.tile(raw, int(np.ceil(n / raw.shape[0])))
    offset = int(entry["offset_s"] * manifest["sample_rate"]) % max(1, raw.shape[0] - n + 1)
    x = raw[offset : offset + n]
    rms = float(np.sqrt(np.mean(x * x)))
    if rms == 0.0:
        raise InputError(f"clip {entry['clip']} is silent at offset {entry['offset_s']}")
    x = x / rms
    primary, _ = read_rir(rir_dir / index["primary"][entry["position_index"]])
    secondary, _ = read_rir(rir_dir / index["secondary"])
    eta = np.inf if entry["eta"] is None else float(entry["eta"])
    return Episode(x=x, primary=primary.taps, secondary=secondary.taps,
                   eta=eta, snr_db=entry["snr_db"], seed=entry["seed"])


def make_synthetic_episodes(count: int, duration_s: float, primary_len: int,
                            secondary_len: int, band=(200.0, 1800.0),
                            snr_db: float | None = 30.0, eta: float = np.inf,
                            seed: int = 0, room: dict | None = None,
                            sample_rate: int = 16000) -> list:
    """Band-limited-noise episodes over the room's nine positions; primary
    and secondary RIRs are truncated to the requested lengths."""
    cfg = dict(PAPER_ROOM)
    if room:
        cfg.update(room)
    spec = RoomSpec(dimensions=tuple(cfg["dimensions"]),
                    source_pos=tuple(cfg["cube_center"]),
                    speaker_pos=tuple(cfg["speaker"]),
                    error_mic_pos=tuple(cfg["error_mic"]),
                    t60=cfg["t60"], sound_speed=cfg["sound_speed"],
                    sample_rate=sample_rate)
    positions = reference_positions(cfg["cube_center"], cfg["cube_edge"])
    primaries = [image_method_rir(spec, pos, cfg["error_mic"], primary_len)
                 for pos in positions]
    secondary = image_method_rir(spec, cfg["speaker"], cfg["error_mic"], secondary_len)
    n = int(round(duration_s * sample_rate))
    episodes = []
    for i in range(count):
        rng = make_rng(seed + i, STREAM_NOISE)
        x = band_limited_noise(band[0], band[1], n, sample_rate, rng)
        x = x / float(np.sqrt(np.mean(x * x)))
        episodes.append(Episode(
            x=x, primary=primaries[i % len(positions)].taps,
            secondary=secondary.taps, eta=eta, snr_db=snr_db, seed=seed + i))
    return episodes
