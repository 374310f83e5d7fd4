"""The learned update rule: a single-headed-attention recurrent network that
maps compressed complex subband features to a constrained complex gradient
for the half-spectrum fullband weights.

Architecture: linear encoder with PReLU, one GRU layer, layer norm, an
attention block with learnable sigmoid-gated feature embeddings, a residual
feedforward block (H -> 4H -> H), and a two-layer decoder.  The output
amplitude is squashed into [0, 2] per complex element with phase preserved.

The forward pass is written entirely with autodiff ops, so the same code
runs tape-free for real-time inference and recorded for meta-training.
"""

import json
import struct
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ConfigurationError, InputError
from .filterbank import SubbandFrame
from .rng import STREAM_PARAMS, make_rng

OP_SET_VERSION = 1
_CKPT_MAGIC = "anclab-checkpoint"

AMP_LOG_BOUND = 10.0  # |g| is clamped to [e^-10, e^10] before the log map


def _is_pow2(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


@dataclass(frozen=True)
class ModelDims:
    """Derived sizing for one controller configuration.

    n_taps N and subbands K fix the bank (D = K/2, Q = N/D); the network
    consumes the first K/2 subbands with the first Q/2 FFT bins of each
    feature, giving an input of exactly 2N reals, and emits N/2 complex
    values (the half-spectrum weight gradient).
    """

    n_taps: int
    subbands: int
    hidden: int

    def __post_init__(self):
        if not _is_pow2(self.n_taps):
            raise ConfigurationError("n_taps must be a power of two")
        if not _is_pow2(self.subbands) or self.subbands < 4:
            raise ConfigurationError("subbands must be a power of two >= 4")
        if self.n_taps % self.decimation != 0 or self.subband_len < 2:
            raise ConfigurationError("subbands incompatible with n_taps")
        if self.hidden < 1:
            raise ConfigurationError("hidden width must be >= 1")

    @property
    def decimation(self) -> int:
        return self.subbands // 2

    @property
    def subband_len(self) -> int:
        return self.n_taps // self.decimation

    @property
    def bands(self) -> int:
        return self.subbands // 2

    @property
    def feature_bins(self) -> int:
        return self.subband_len // 2

    @property
    def input_size(self) -> int:
        return 2 * self.n_taps

    @property
    def output_size(self) -> int:
        return self.n_taps // 2


def param_shapes(dims: ModelDims) -> dict[str, tuple[int, ...]]:
    """Name -> shape table; the single source of truth for init and loading."""
    h, m, z = dims.hidden, dims.input_size, dims.output_size
    return {
        "enc_w": (h, m), "enc_b": (h,), "enc_slope": (1,),
        "gru_wi": (3 * h, h), "gru_wh": (3 * h, h),
        "gru_bi": (3 * h,), "gru_bh": (3 * h,),
        "ln1_g": (h,), "ln1_b": (h,), "ln2_g": (h,), "ln2_b": (h,),
        "attn_qr": (h,), "attn_kr": (h,), "attn_vr": (h,),
        "attn_wq": (h, h), "attn_bq": (h,),
        "attn_wk": (h, h), "attn_bk": (h,),
        "attn_wv": (h, h), "attn_bv": (h,),
        "ff_w1": (4 * h, h), "ff_b1": (4 * h,), "ff_slope": (1,),
        "ff_w2": (h, 4 * h), "ff_b2": (h,),
        "dec_w1": (h, h), "dec_b1": (h,), "dec_slope": (1,),
        "dec_w2": (2 * z, h), "dec_b2": (2 * z,),
    }


@dataclass
class ModelParams:
    """Every learnable tensor of the update rule."""

    dims: ModelDims
    seed: int
    tensors: dict[str, np.ndarray]

    def copy(self) -> "ModelParams":
        return ModelParams(self.dims, self.seed,
                           {k: v.copy() for k, v in self.tensors.items()})


OUTPUT_INIT_SCALE = 1e-4


def init_params(dims: ModelDims, seed: int) -> ModelParams:
    """Uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) matrices and biases; PReLU
    slopes 0.25; layer-norm scale 1 / offset 0; attention embeddings zero
    (their sigmoid gates start at 0.5).

    The final decoder layer is scaled down by OUTPUT_INIT_SCALE: the
    amplitude constraint maps |g| below e^-10 to an exactly-zero update
    with zero gradient, so the untrained rule must start quiet but strictly
    above that floor.  A plain-uniform final layer emits amplitude ~1
    updates at every instant and destabilises the unrolled plant before
    any learning can happen.
    """
    rng = make_rng(seed, STREAM_PARAMS)
    tensors: dict[str, np.ndarray] = {}
    shapes = param_shapes(dims)
    fan_in = {
        "enc": dims.input_size, "gru_wi": dims.hidden, "gru_wh": dims.hidden,
        "attn": dims.hidden, "ff_w1": dims.hidden, "ff_w2": 4 * dims.hidden,
        "dec_w1": dims.hidden, "dec_w2": dims.hidden,
    }
    for name, shape in shapes.items():
        if name.endswith("_slope"):
            tensors[name] = np.full(shape, 0.25)
        elif name in ("ln1_g", "ln2_g"):
            tensors[name] = np.ones(shape)
        elif name in ("ln1_b", "ln2_b") or name in ("attn_qr", "attn_kr", "attn_vr"):
            tensors[name] = np.zeros(shape)
        else:
            key = name.replace("_b", "_w") if "_b" in name else name
            stem = next(s for s in fan_in if key.startswith(s))
            bound = 1.0 / np.sqrt(fan_in[stem])
            tensors[name] = rng.uniform(-bound, bound, size=shape)
            if name in ("dec_w2", "dec_b2"):
                tensors[name] *= OUTPUT_INIT_SCALE
    return ModelParams(dims=dims, seed=seed, tensors=tensors)


# ---------------------------------------------------------------------------
# Elementwise maps (value-level helpers mirrored by autodiff ops)

def compress_input(z: np.ndarray) -> np.ndarray:
    """ln(1 + |z|) e^{j angle z}: compresses magnitude, preserves phase."""
    z = np.asarray(z, dtype=complex)
    m = np.abs(z)
    factor = np.where(m > 0.0, np.log1p(m) / np.maximum(m, 1e-300), 1.0)
    return z * factor


def constrain_gradient(g: np.ndarray) -> np.ndarray:
    """Map each element's amplitude through ln(clamp(|g|, e^-10, e^10))/10 + 1,
    landing in [0, 2]; phase is untouched."""
    g = np.asarray(g, dtype=complex)
    m = np.abs(g)
    amp = np.log(np.clip(m, np.exp(-AMP_LOG_BOUND), np.exp(AMP_LOG_BOUND))) / AMP_LOG_BOUND + 1.0
    unit = g / np.maximum(m, 1e-300)
    return amp * unit


def feature_vector(frame: SubbandFrame, dims: ModelDims) -> np.ndarray:
    """Flatten a SubbandFrame into the network's input layout.

    Per band the compressed reference and error features (first Q/2 bins
    each) alternate: Re[x_0], Re[e_0], Re[x_1], Re[e_1], ..., then the same
    order for imaginary parts.  Length is exactly dims.input_size = 2N.
    """
    bins = dims.feature_bins
    x = compress_input(frame.x_ff[: dims.bands, :bins])
    e = compress_input(frame.e_f[: dims.bands, :bins])
    if x.shape != (dims.bands, bins):
        raise ConfigurationError("frame does not match the model dimensions")
    re = np.stack([x.real, e.real], axis=1).reshape(-1)
    im = np.stack([x.imag, e.imag], axis=1).reshape(-1)
    return np.concatenate([re, im])


# ---------------------------------------------------------------------------
# Forward pass (tape-capable)

def _gru_cell(t, u, h):
    gi = ad.linear(u, t["gru_wi"], t["gru_bi"])
    gh = ad.linear(h, t["gru_wh"], t["gru_bh"])
    hsize = ad._val(gh).shape[-1] // 3
    i_r = ad.slice_last(gi, 0, hsize)
    i_z = ad.slice_last(gi, hsize, 2 * hsize)
    i_n = ad.slice_last(gi, 2 * hsize, 3 * hsize)
    h_r = ad.slice_last(gh, 0, hsize)
    h_z = ad.slice_last(gh, hsize, 2 * hsize)
    h_n = ad.slice_last(gh, 2 * hsize, 3 * hsize)
    r = ad.sigmoid(ad.add(i_r, h_r))
    z = ad.sigmoid(ad.add(i_z, h_z))
    n = ad.tanh(ad.add(i_n, ad.mul(r, h_n)))
    return ad.add(ad.mul(ad.sub(1.0, z), n), ad.mul(z, h))


def _attention(t, u):
    q = ad.linear(ad.mul(u, ad.sigmoid(t["attn_qr"])), t["attn_wq"], t["attn_bq"])
    k = ad.linear(ad.mul(u, ad.sigmoid(t["attn_kr"])), t["attn_wk"], t["attn_bk"])
    v = ad.linear(ad.mul(u, ad.sigmoid(t["attn_vr"])), t["attn_wv"], t["attn_bv"])
    score = ad.dot_last(q, k)
    # one time step: the softmax over a single score is identically 1, so the
    # output equals v; the q/k path stays on the tape with zero gradient
    weight = ad.softmax_last(score)
    return ad.mul(weight, v)


def constrain_gradient_t(g):
    """Tape-capable output constraint over split-layout complex values."""
    amp = ad.cmag(g)
    amp = ad.clamp(amp, float(np.exp(-AMP_LOG_BOUND)), float(np.exp(AMP_LOG_BOUND)))
    amp = ad.add(ad.scale(ad.log(amp), 1.0 / AMP_LOG_BOUND), 1.0)
    return ad.rcmul(amp, ad.cunit(g))


def forward_flat(tensors, dims: ModelDims, features, h):
    """Run the network on a flat (B, 2N) feature batch.

    `tensors` maps parameter names to Tensors or ndarrays; `features` and
    `h` (B, H) likewise.  Returns (g_tilde (B, 2*Z) split layout, h_new).
    """
    t = tensors
    u = ad.prelu(ad.linear(features, t["enc_w"], t["enc_b"]), t["enc_slope"])
    h_new = _gru_cell(t, u, h)
    att = _attention(t, ad.layernorm(h_new, t["ln1_g"], t["ln1_b"]))
    r1 = ad.add(h_new, att)
    u2 = ad.layernorm(r1, t["ln2_g"], t["ln2_b"])
    ff = ad.linear(ad.prelu(ad.linear(u2, t["ff_w1"], t["ff_b1"]), t["ff_slope"]),
                   t["ff_w2"], t["ff_b2"])
    r2 = ad.add(r1, ff)
    d1 = ad.prelu(ad.linear(r2, t["dec_w1"], t["dec_b1"]), t["dec_slope"])
    g = ad.linear(d1, t["dec_w2"], t["dec_b2"])
    return constrain_gradient_t(g), h_new


def forward(params: ModelParams, frame: SubbandFrame,
            h: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """One update-rule evaluation: (complex gradient of length N/2, new h)."""
    feats = feature_vector(frame, params.dims)[None, :]
    out, h_new = forward_flat(params.tensors, params.dims, feats, h[None, :])
    return ad.split_complex(out[0]), h_new[0]


def attention(params: ModelParams, u: np.ndarray) -> np.ndarray:
    """The attention block alone, on a single activation vector."""
    return _attention(params.tensors, np.asarray(u, dtype=float)[None, :])[0]


def count_params_flops(params: ModelParams) -> dict[str, int]:
    """Exact parameter count and multiply-add pairs for one forward pass.

    MAC accounting: matrix-vector products at their in*out size, the GRU's
    two 3H*H products, the attention gates/score/blend at H each, input
    compression at one MAC per input value, and the output constraint at
    two MACs per complex element.
    """
    dims = params.dims
    h, m, z = dims.hidden, dims.input_size, dims.output_size
    macs = (
        h * m          # encoder
        + 6 * h * h    # GRU input + recurrent products
        + 3 * h        # attention embedding gates
        + 3 * h * h    # attention q/k/v projections
        + 2 * h        # attention score and blend
        + 8 * h * h    # feedforward block H -> 4H -> H
        + h * h        # decoder hidden layer
        + 2 * z * h    # decoder output layer
        + m            # input compression
        + 2 * z        # output constraint
    )
    return {
        "param_count": int(sum(v.size for v in params.tensors.values())),
        "flops_per_update": int(macs),
    }


# ---------------------------------------------------------------------------
# Checkpoints: JSON manifest + length-prefixed little-endian float64 blobs

def save_checkpoint(params: ModelParams, path) -> None:
    manifest = {
        "format": _CKPT_MAGIC,
        "version": 1,
        "op_set": OP_SET_VERSION,
        "dims": {"n_taps": params.dims.n_taps, "subbands": params.dims.subbands,
                 "hidden": params.dims.hidden},
        "seed": params.seed,
        "tensors": [{"name": k, "shape": list(v.shape)} for k, v in params.tensors.items()],
    }
    blob = json.dumps(manifest).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for _, tensor in params.tensors.items():
            fh.write(struct.pack("<Q", tensor.size))
            fh.write(np.ascontiguousarray(tensor, dtype="<f8").tobytes())


def load_checkpoint(path) -> ModelParams:
    with open(path, "rb") as fh:
        raw = fh.read(4)
        if len(raw) != 4:
            raise InputError(f"truncated checkpoint {path}")
        (mlen,) = struct.unpack("<I", raw)
        try:
            manifest = json.loads(fh.read(mlen).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError):
            raise InputError(f"{path} is not a checkpoint file")
        if not isinstance(manifest, dict) or manifest.get("format") != _CKPT_MAGIC:
            raise InputError(f"{path} is not a checkpoint file")
        if manifest.get("op_set") != OP_SET_VERSION:
            raise InputError(f"{path} was written with an incompatible op set")
        dims = ModelDims(**manifest["dims"])
        expected = param_shapes(dims)
        tensors = {}
        for entry in manifest["tensors"]:
            name, shape = entry["name"], tuple(entry["shape"])
            if name not in expected or expected[name] != shape:
                raise InputError(f"checkpoint tensor {name}{shape} does not fit the declared dims")
            (count,) = struct.unpack("<Q", fh.read(8))
            if count != int(np.prod(shape)):
                raise InputError(f"checkpoint tensor {name} has inconsistent size")
            data = np.frombuffer(fh.read(8 * count), dtype="<f8")
            if data.shape[0] != count:
                raise InputError(f"truncated tensor payload in {path}")
            tensors[name] = data.reshape(shape).copy()
        if set(tensors) != set(expected):
            raise InputError(f"checkpoint {path} misses parameter tensors")
    return ModelParams(dims=dims, seed=int(manifest["seed"]), tensors=tensors)
