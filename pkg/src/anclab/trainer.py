"""Meta-training of the learned update rule.

One inner loop unrolls F*D plant samples on the autodiff tape: the fullband
filter synthesises anti-noise through the (saturating) secondary path, the
error feeds back into the subband features, the network updates the
half-spectrum weights every D samples, and the frequency-domain sample
losses accumulate into the window's meta loss.  Gradients truncate at
window boundaries; weight and hidden state values carry across windows of
the same episode.

Episodes inside a batch advance in lockstep as rows of (B, ...) arrays on a
single tape; the batch loss is the mean of per-episode meta losses, so the
parameter gradient equals the average of per-episode gradients.
"""

import json
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import dsp
from .acoustics import desired_signal, AcousticPath, main_delay_path
from .errors import ConfigurationError, InputError
from .filterbank import FilterBank
from .model import ModelDims, ModelParams, compress_input, forward_flat
from .rng import STREAM_MEASUREMENT, STREAM_SHUFFLE, make_rng

VARIANTS = ("whole-path", "main-delay")


@dataclass
class MetaConfig:
    """Hyperparameters of the meta-training loop."""

    meta_frames: int = 8
    decimation: int = 16
    step_size: float = 0.4
    batch_size: int = 150
    learning_rate: float = 1e-4
    lr_decay: float = 0.5
    patience: int = 3
    variant: str = "whole-path"
    grad_clip: float | None = None  # global gradient-norm ceiling per step

    def __post_init__(self):
        if self.meta_frames < 1:
            raise ConfigurationError("meta_frames must be >= 1")
        if self.step_size <= 0:
            raise ConfigurationError("step_size must be positive")
        if not 0.0 < self.lr_decay < 1.0:
            raise ConfigurationError("lr_decay must be a fraction in (0, 1)")
        if self.variant not in VARIANTS:
            raise ConfigurationError(f"variant must be one of {VARIANTS}")
        if self.batch_size < 1 or self.patience < 0 or self.learning_rate <= 0:
            raise ConfigurationError("invalid training hyperparameters")


@dataclass
class Episode:
    """One materialised training episode."""

    x: np.ndarray
    primary: np.ndarray
    secondary: np.ndarray
    eta: float  # np.inf selects the linear loudspeaker
    snr_db: float | None
    seed: int


@dataclass
class EpisodeBatch:
    """A list of episodes trained in lockstep (equal lengths required)."""

    episodes: list

    def __post_init__(self):
        if not self.episodes:
            raise InputError("episode batch is empty")
        length = self.episodes[0].x.shape[0]
        if any(ep.x.shape[0] != length for ep in self.episodes):
            raise ConfigurationError("episodes in a batch must have equal lengths")


def variant_features(variant: str, secondary_taps: np.ndarray) -> np.ndarray:
    """Secondary-path estimate used for reference filtering.

    whole-path uses the true path; main-delay a unit tap at its peak lag.
    """
    if variant not in VARIANTS:
        raise ConfigurationError(f"variant must be one of {VARIANTS}")
    if variant == "whole-path":
        return np.asarray(secondary_taps, dtype=float).copy()
    return main_delay_path(AcousticPath(np.asarray(secondary_taps))).taps


# ---------------------------------------------------------------------------
# Batched episode state

class BatchState:
    """Lockstep plant + feature state for a batch of episodes."""

    def __init__(self, batch: EpisodeBatch, dims: ModelDims, config: MetaConfig):
        if config.decimation != dims.decimation:
            raise ConfigurationError(
                f"config decimation {config.decimation} does not match K/2 = {dims.decimation}")
        eps = batch.episodes
        self.dims = dims
        self.config = config
        self.bank = FilterBank.design(dims.n_taps, dims.subbands)
        B = len(eps)
        T = eps[0].x.shape[0]
        D, Q, S = dims.decimation, dims.subband_len, dims.bands
        self.n_samples = T
        self.x = np.stack([ep.x for ep in eps])
        self.eta = np.array([[np.inf if ep.eta is None else ep.eta] for ep in eps])
        max_len = max(ep.secondary.shape[0] for ep in eps)
        self.s_kern = np.zeros((B, max_len))
        for i, ep in enumerate(eps):
            self.s_kern[i, : ep.secondary.shape[0]] = ep.secondary

        self.d = np.stack([
            desired_signal(AcousticPath(ep.primary), ep.x) for ep in eps])
        self.v = np.zeros((B, T))
        for i, ep in enumerate(eps):
            if ep.snr_db is not None:
                p_d = float(np.mean(self.d[i] ** 2))
                sigma = np.sqrt(p_d * 10.0 ** (-ep.snr_db / 10.0))
                self.v[i] = sigma * make_rng(ep.seed, STREAM_MEASUREMENT).standard_normal(T)

        # reference-side features are independent of the controller: filter,
        # decimate, and run the analysis bank over the whole episode up front
        s_hat = [variant_features(config.variant, ep.secondary) for ep in eps]
        x_f = np.stack([np.convolve(ep.x, h)[:T] for ep, h in zip(eps, s_hat)])
        z = x_f[:, ::D]  # values at the scheduled update instants
        self.n_instants = z.shape[1]
        a_used = self.bank.analysis[:S]
        zp = np.concatenate([np.zeros((B, Q - 1)), z], axis=1)
        zwin = np.lib.stride_tricks.sliding_window_view(zp, Q, axis=1)[..., ::-1]
        self.x_fk = np.einsum("btq,sq->bts", zwin, a_used)  # (B, n_inst, S)
        self.x_fk_padded = np.concatenate(
            [np.zeros((B, Q - 1, S), dtype=complex), self.x_fk], axis=1)

        # constants for the error-side features
        self.e_bank_w = np.concatenate([a_used.real, a_used.imag], axis=0)  # (2S, Q)
        unit = np.zeros(Q)
        unit[-1] = 1.0
        fcol = dsp.fft(unit)  # spectrum of the zero-padded unit sample
        self.e_fcol = np.tile(fcol[: dims.feature_bins], S)

        # newest-first reference windows for the filter output; a view into
        # the padded base so zero_episode can silence rows in place
        self._xp = np.concatenate([np.zeros((B, dims.n_taps - 1)), self.x], axis=1)
        self.x_windows = np.lib.stride_tricks.sliding_window_view(
            self._xp, dims.n_taps, axis=1)[..., ::-1]

        # carried state (values only; gradients truncate at window boundaries)
        self.w_s = np.zeros((B, 2 * dims.output_size))
        self.h = np.zeros((B, dims.hidden))
        self.e_inst_ring = np.zeros((B, Q - 1))   # error at past instants, newest first
        self.fy_ring = np.zeros((B, max_len - 1)) if max_len > 1 else np.zeros((B, 0))
        self.cursor = 0
        self.alive = np.ones(B, dtype=bool)

    @property
    def batch_size(self) -> int:
        return self.x.shape[0]

    def windows_remaining(self) -> int:
        fd = self.config.meta_frames * self.dims.decimation
        return (self.n_samples - self.cursor) // fd

    def save_carry(self) -> dict:
        """Snapshot of the values carried across windows."""
        return {"w_s": self.w_s.copy(), "h": self.h.copy(),
                "e_inst_ring": self.e_inst_ring.copy(),
                "fy_ring": self.fy_ring.copy(), "cursor": self.cursor}

    def load_carry(self, carry: dict) -> None:
        self.w_s = carry["w_s"].copy()
        self.h = carry["h"].copy()
        self.e_inst_ring = carry["e_inst_ring"].copy()
        self.fy_ring = carry["fy_ring"].copy()
        self.cursor = carry["cursor"]

    def zero_episode(self, row: int) -> None:
        """Silence a diverged episode so its rows stay finite and massless."""
        for arr in (self.x, self._xp, self.d, self.v, self.w_s, self.h,
                    self.e_inst_ring, self.fy_ring):
            arr[row] = 0.0
        self.x_fk[row] = 0.0
        self.x_fk_padded[row] = 0.0
        self.alive[row] = False


def prepare_episodes(episodes, dims: ModelDims, config: MetaConfig) -> BatchState:
    return BatchState(EpisodeBatch(list(episodes)), dims, config)


def _conv_tail(fy_ring: np.ndarray, kernel: np.ndarray, count: int) -> np.ndarray:
    """History part of (s * fy) for the next `count` samples."""
    B, R = fy_ring.shape
    L = kernel.shape[1]
    tail = np.zeros((B, count))
    for i in range(min(count, L - 1)):
        width = L - 1 - i
        if width <= 0 or R == 0:
            break
        width = min(width, R)
        tail[:, i] = np.einsum("bl,bl->b", kernel[:, i + 1 : i + 1 + width],
                               fy_ring[:, :width])
    return tail


def _window_x_features(state: BatchState, t0: int):
    """Compressed reference features for the F instants of one window.

    Returns a list (per instant) of per-band (re, im) constant pieces,
    each of shape (B, feature_bins).
    """
    dims = state.dims
    F = state.config.meta_frames
    Q, bins, S = dims.subband_len, dims.feature_bins, dims.bands
    span = state.x_fk_padded[:, t0 : t0 + F + Q - 1]
    win = np.lib.stride_tricks.sliding_window_view(span, Q, axis=1)
    # swv leaves the window axis last: (B, F, S, Q), oldest sample first
    x_ff = np.fft.fft(win[..., ::-1])[..., :bins]  # (B, F, S, bins)
    comp = compress_input(x_ff)
    out = []
    for j in range(F):
        out.append([(np.ascontiguousarray(comp[:, j, s].real),
                     np.ascontiguousarray(comp[:, j, s].imag)) for s in range(S)])
    return out


def _assemble_input(x_pieces, e_feat, dims: ModelDims):
    """Interleave constant reference features with error-feature slices."""
    bins, S = dims.feature_bins, dims.bands
    n = S * bins
    re_parts, im_parts = [], []
    for s in range(S):
        re_parts.append(x_pieces[s][0])
        re_parts.append(ad.slice_last(e_feat, s * bins, (s + 1) * bins))
        im_parts.append(x_pieces[s][1])
        im_parts.append(ad.slice_last(e_feat, n + s * bins, n + (s + 1) * bins))
    return ad.concat_last(re_parts + im_parts)


def inner_loop(config: MetaConfig, state: BatchState, params: ModelParams,
               tape: ad.Tape | None = None, param_tensors=None, update_rule=None,
               collect_trace: bool = False):
    """Advance one window of F*D samples; returns (meta_loss, per_episode_loss).

    With a tape the meta loss is a recorded scalar ready for backward();
    without one the same arithmetic runs on plain arrays.  `update_rule`
    replaces the network with an oracle callable(state, instant_index,
    e_k_split) -> (B, 2Z) for equivalence tests.  Weight and hidden state
    values persist on `state`; gradients do not cross window boundaries.
    """
    dims = state.dims
    F, D = config.meta_frames, dims.decimation
    fd = F * D
    n0 = state.cursor
    if n0 + fd > state.n_samples:
        raise InputError("episode exhausted: no full window left")
    Q = dims.subband_len
    tensors = param_tensors
    if tensors is None and params is not None:
        tensors = params.tensors

    d_win = state.d[:, n0 : n0 + fd]
    v_win = state.v[:, n0 : n0 + fd]
    dv = d_win + v_win
    tail = _conv_tail(state.fy_ring, state.s_kern, fd)
    blocks = state.x_windows[:, n0 : n0 + fd]
    x_feats = _window_x_features(state, n0 // D)

    w_s = state.w_s
    h = state.h
    w_time = _stack_time(w_s, dims, tape)
    bounds = [(0, 1)] + [(j * D + 1, (j + 1) * D + 1) for j in range(F - 1)] \
        + [((F - 1) * D + 1, fd)]

    fy_parts = []
    e_parts = []
    inst_e = []  # (B, 1) error at past in-window instants, newest last
    trace_y = [] if collect_trace else None
    for j, (a, b) in enumerate(bounds):
        y_seg = ad.toeplitz_apply(w_time, blocks[:, a:b])
        if collect_trace:
            trace_y.append(ad._val(y_seg))
        fy_parts.append(ad.saturate_t(y_seg, state.eta))
        fy_win = ad.concat_last(fy_parts) if len(fy_parts) > 1 else fy_parts[0]
        yp_seg = ad.fir_span(fy_win, state.s_kern, tail[:, a:b], start=a)
        e_seg = ad.add(yp_seg, dv[:, a:b])
        e_parts.append(e_seg)
        if j >= F:
            break
        # the instant sits at the last sample of this segment
        width = b - a
        e_now = ad.slice_last(e_seg, width - 1, width)
        inst_e.append(e_now)
        recent = list(reversed(inst_e))[:Q]
        ring = state.e_inst_ring[:, : max(0, Q - len(recent))]
        strided = ad.concat_last(recent + ([ring] if ring.shape[1] else []))
        e_k = ad.linear(strided, state.e_bank_w, np.zeros(state.e_bank_w.shape[0]))
        if update_rule is not None:
            g_t = update_rule(state, n0 // D + j, ad._val(e_k))
        else:
            e_feat = ad.compress_c(ad.cmulc(ad.crep(e_k, dims.feature_bins), state.e_fcol))
            u_in = _assemble_input(x_feats[j], e_feat, dims)
            g_t, h = forward_flat(tensors, dims, u_in, h)
        w_s = ad.sub(w_s, ad.scale(g_t, config.step_size))
        w_time = _stack_time(w_s, dims, tape)

    e_win = ad.concat_last(e_parts)
    losses = ad.unitpad_fft_sqnorm(e_win, Q)
    per_episode = ad.mean_last(losses)
    mask = state.alive.astype(float)
    alive = max(1.0, float(mask.sum()))
    meta_loss = ad.scale(ad.mean_all(ad.mul(per_episode, mask)),
                         state.batch_size / alive)

    # value-level state carry (gradient truncation happens here)
    fy_vals = np.concatenate([ad._val(p) for p in fy_parts], axis=-1)
    e_vals = ad._val(e_win)
    width = state.fy_ring.shape[1]
    if width:
        state.fy_ring = np.concatenate(
            [fy_vals[:, ::-1], state.fy_ring], axis=1)[:, :width]
    inst_vals = e_vals[:, ::D][:, ::-1]  # newest first
    state.e_inst_ring = np.concatenate(
        [inst_vals, state.e_inst_ring], axis=1)[:, : Q - 1]
    state.w_s = ad._val(w_s).copy()
    state.h = ad._val(h).copy()
    state.cursor = n0 + fd

    info = {"per_episode": ad._val(per_episode), "e": e_vals}
    if collect_trace:
        info["y"] = np.concatenate(trace_y, axis=-1)
    return meta_loss, info


def _stack_time(w_s, dims: ModelDims, tape) -> np.ndarray:
    """Half-spectrum -> real fullband taps (direct stacking, tape-capable)."""
    full = ad.hermitian_full(w_s, dims.n_taps)
    w = ad.ifft_c(full)
    return ad.slice_last(w, 0, dims.n_taps)


# ---------------------------------------------------------------------------
# Outer optimisation

@dataclass
class OptimizerState:
    """Adam with bias correction and a non-finite-gradient guard."""

    m: dict
    v: dict
    step: int
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    skipped: int = 0


def adam_init(params: ModelParams, lr: float) -> OptimizerState:
    return OptimizerState(
        m={k: np.zeros_like(v) for k, v in params.tensors.items()},
        v={k: np.zeros_like(v) for k, v in params.tensors.items()},
        step=0, lr=lr)


def adam_step(opt: OptimizerState, params: ModelParams, grads: dict) -> None:
    for g in grads.values():
        if not np.all(np.isfinite(g)):
            opt.skipped += 1
            return
    opt.step += 1
    b1c = 1.0 - opt.beta1 ** opt.step
    b2c = 1.0 - opt.beta2 ** opt.step
    for name, tensor in params.tensors.items():
        g = grads[name]
        opt.m[name] = opt.beta1 * opt.m[name] + (1.0 - opt.beta1) * g
        opt.v[name] = opt.beta2 * opt.v[name] + (1.0 - opt.beta2) * g * g
        m_hat = opt.m[name] / b1c
        v_hat = opt.v[name] / b2c
        tensor -= opt.lr * m_hat / (np.sqrt(v_hat) + opt.eps_adam)


def _train_window(state: BatchState, params: ModelParams, config: MetaConfig,
                  opt: OptimizerState) -> tuple[float, int]:
    """One recorded window plus an Adam step; returns (loss, new divergences)."""
    diverged = 0
    snapshot = state.save_carry()
    loss = None
    for _ in range(2):
        tape = ad.Tape()
        watched = {k: tape.watch(v) for k, v in params.tensors.items()}
        loss, info = inner_loop(config, state, params, tape=tape,
                                param_tensors=watched)
        bad = ~np.isfinite(info["per_episode"]) & state.alive
        if not bad.any():
            break
        # divergence guard: roll the window back, silence the offending
        # episodes, and rerun so shared-parameter gradients stay finite
        state.load_carry(snapshot)
        for row in np.flatnonzero(bad):
            state.zero_episode(int(row))
            diverged += 1
    else:
        return float("nan"), diverged
    tape.backward(loss)
    grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.data))
             for k, t in watched.items()}
    if config.grad_clip is not None:
        total = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
        if total > config.grad_clip:
            scale_by = config.grad_clip / total
            grads = {k: g * scale_by for k, g in grads.items()}
    adam_step(opt, params, grads)
    return float(ad._val(loss)), diverged


def evaluate_meta_loss(config: MetaConfig, dims: ModelDims, episodes,
                       params: ModelParams, batch_size: int | None = None) -> float:
    """Mean meta loss over full episodes, forward only (fresh state)."""
    episodes = list(episodes)
    if not episodes:
        raise InputError("no episodes to evaluate")
    size = batch_size or config.batch_size
    totals = []
    for lo in range(0, len(episodes), size):
        state = prepare_episodes(episodes[lo : lo + size], dims, config)
        sums = np.zeros(state.batch_size)
        count = 0
        while state.windows_remaining() > 0:
            _, info = inner_loop(config, state, params)
            sums += info["per_episode"]
            count += 1
        totals.extend(sums / max(count, 1))
    return float(np.mean(totals))


def split_clips(episodes, clip_samples: int):
    """Split episodes into independent training clips (state resets per clip).

    Short unroll horizons keep the carried-weight distribution seen during
    training close to the clean start-from-zero states met at evaluation.
    """
    out = []
    for ep in episodes:
        total = ep.x.shape[0]
        for j, lo in enumerate(range(0, total - clip_samples + 1, clip_samples)):
            out.append(Episode(x=ep.x[lo : lo + clip_samples].copy(), primary=ep.primary,
                               secondary=ep.secondary, eta=ep.eta, snr_db=ep.snr_db,
                               seed=ep.seed * 131 + j))
    return out


def train(config: MetaConfig, dims: ModelDims, train_episodes, val_episodes,
          params: ModelParams, max_epochs: int = 50, seed: int = 0,
          log_path=None, checkpoint_dir=None, clip_samples=None):
    """Meta-train `params` in place; returns (best_params, log_records).

    Every epoch runs all windows of all training episodes in shuffled
    batches with one Adam step per window, then scores the validation set.
    The learning rate halves whenever validation exceeds the running
    minimum, and training stops after `patience` non-improving epochs.
    The best-validation parameters are returned.

    `clip_samples` splits the training episodes into shorter clips with
    per-clip state resets: an int applies to every epoch, a list gives a
    per-epoch horizon curriculum (None entries train on full episodes).
    """
    base_episodes = list(train_episodes)
    val_episodes = list(val_episodes)

    def episodes_for(epoch):
        if clip_samples is None:
            return base_episodes
        clip = clip_samples[min(epoch, len(clip_samples) - 1)] \
            if isinstance(clip_samples, (list, tuple)) else clip_samples
        if clip is None:
            return base_episodes
        return split_clips(base_episodes, int(clip))

    if not base_episodes:
        raise ConfigurationError("training set is empty")
    opt = adam_init(params, config.learning_rate)
    log: list[dict] = []
    best_val = np.inf
    best_params = params.copy()
    since_improvement = 0
    divergences = 0

    log_fh = open(log_path, "w") if log_path is not None else None
    if log_fh:
        header = {"hyperparameters": {
            "meta_frames": config.meta_frames, "decimation": config.decimation,
            "step_size": config.step_size, "batch_size": config.batch_size,
            "learning_rate": config.learning_rate, "lr_decay": config.lr_decay,
            "patience": config.patience, "variant": config.variant,
            "n_taps": dims.n_taps, "subbands": dims.subbands, "hidden": dims.hidden,
            "max_epochs": max_epochs, "seed": seed,
        }}
        log_fh.write(json.dumps(header) + "\n")

    try:
        for epoch in range(max_epochs):
            t_start = time.perf_counter()
            epoch_episodes = episodes_for(epoch)
            order = make_rng(seed, STREAM_SHUFFLE + epoch).permutation(len(epoch_episodes))
            epoch_losses = []
            for lo in range(0, len(order), config.batch_size):
                chosen = [epoch_episodes[i] for i in order[lo : lo + config.batch_size]]
                state = prepare_episodes(chosen, dims, config)
                while state.windows_remaining() > 0:
                    loss, newly_dead = _train_window(state, params, config, opt)
                    divergences += newly_dead
                    if np.isfinite(loss):
                        epoch_losses.append(loss)
            val = evaluate_meta_loss(config, dims, val_episodes, params) \
                if val_episodes else float(np.mean(epoch_losses))
            record = {
                "epoch": epoch,
                "train_L_M": float(np.mean(epoch_losses)) if epoch_losses else float("nan"),
                "val_L_M": val,
                "lr": opt.lr,
                "wall_seconds": time.perf_counter() - t_start,
                "divergences": divergences,
                "skipped_steps": opt.skipped,
            }
            log.append(record)
            if log_fh:
                log_fh.write(json.dumps(record) + "\n")
                log_fh.flush()
            if checkpoint_dir is not None:
                from pathlib import Path

                from .model import save_checkpoint
                save_checkpoint(params, Path(checkpoint_dir) / f"epoch{epoch:03d}.ckpt")
            if val < best_val:
                best_val = val
                best_params = params.copy()
                since_improvement = 0
            else:
                since_improvement += 1
                opt.lr *= config.lr_decay  # validation exceeded the running minimum
                if since_improvement >= config.patience:
                    break
    finally:
        if log_fh:
            log_fh.close()
    if checkpoint_dir is not None:
        from pathlib import Path

        from .model import save_checkpoint
        save_checkpoint(best_params, Path(checkpoint_dir) / "best.ckpt")
    return best_params, log
