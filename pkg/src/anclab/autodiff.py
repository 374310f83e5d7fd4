"""Tape-based reverse-mode automatic differentiation over real float64 arrays.

Complex values travel in a "split" layout: an array of width 2n whose first
n entries are real parts and last n entries are imaginary parts.  Every op
is a plain function that accepts Tensors or raw ndarrays; with no Tensor
among the inputs it just computes numpy values, so the inference path and
the recorded training path execute the identical arithmetic.

The op set is exactly what the update-rule model and the unrolled trainer
need; each op's backward is covered by central finite differences in the
test suite.
"""

import numpy as np

from .acoustics import nse_slope, nse_value
from .errors import ConfigurationError

_UNIT_FLOOR = 1e-300  # guard for magnitude divisions; exact zeros stay zero


class Tensor:
    """A float64 array recorded on (at most) one tape."""

    __slots__ = ("data", "tape", "grad")

    def __init__(self, data, tape):
        self.data = np.asarray(data, dtype=float)
        self.tape = tape
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return neg(self)


class Tape:
    """Append-only record of ops; backward visits nodes once, in reverse."""

    def __init__(self):
        self._nodes = []

    def watch(self, array) -> Tensor:
        """Register a differentiable leaf (a parameter or carried state)."""
        return Tensor(np.asarray(array, dtype=float), self)

    def backward(self, loss: Tensor) -> None:
        if not isinstance(loss, Tensor) or loss.tape is not self:
            raise ConfigurationError("loss must be a Tensor recorded on this tape")
        if loss.data.size != 1:
            raise ConfigurationError("loss must be scalar")
        loss.grad = np.ones_like(loss.data)
        for out, parents, backward in reversed(self._nodes):
            if out.grad is None:
                continue
            grads = backward(out.grad)
            for parent, g in zip(parents, grads):
                if g is None or not isinstance(parent, Tensor):
                    continue
                if parent.grad is None:
                    # backward closures hand over fresh arrays; accumulation
                    # below always reallocates, so adoption is safe
                    parent.grad = g if isinstance(g, np.ndarray) else np.asarray(g, dtype=float)
                else:
                    parent.grad = parent.grad + g


def _val(x):
    return x.data if isinstance(x, Tensor) else x


def _tape(*xs):
    tape = None
    for x in xs:
        if isinstance(x, Tensor):
            if tape is None:
                tape = x.tape
            elif x.tape is not tape:
                raise ConfigurationError("cannot mix tensors from different tapes")
    return tape


def _emit(tape, value, parents, backward):
    if tape is None:
        return value
    out = Tensor(value, tape)
    tape._nodes.append((out, parents, backward))
    return out


def _unbroadcast(g, shape):
    """Reduce a gradient back to `shape` after numpy broadcasting."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# -- arithmetic -------------------------------------------------------------

def add(a, b):
    av, bv = _val(a), _val(b)
    out = av + bv
    tape = _tape(a, b)
    if tape is None:
        return out
    ash, bsh = np.shape(av), np.shape(bv)
    return _emit(tape, out, (a, b),
                 lambda g: (_unbroadcast(g, ash), _unbroadcast(g, bsh)))


def sub(a, b):
    av, bv = _val(a), _val(b)
    out = av - bv
    tape = _tape(a, b)
    if tape is None:
        return out
    ash, bsh = np.shape(av), np.shape(bv)
    return _emit(tape, out, (a, b),
                 lambda g: (_unbroadcast(g, ash), _unbroadcast(-g, bsh)))


def mul(a, b):
    av, bv = _val(a), _val(b)
    out = av * bv
    tape = _tape(a, b)
    if tape is None:
        return out
    ash, bsh = np.shape(av), np.shape(bv)
    return _emit(tape, out, (a, b),
                 lambda g: (_unbroadcast(g * bv, ash), _unbroadcast(g * av, bsh)))


def div(a, b):
    av, bv = _val(a), _val(b)
    out = av / bv
    tape = _tape(a, b)
    if tape is None:
        return out
    ash, bsh = np.shape(av), np.shape(bv)
    return _emit(tape, out, (a, b),
                 lambda g: (_unbroadcast(g / bv, ash),
                            _unbroadcast(-g * av / (bv * bv), bsh)))


def neg(a):
    av = _val(a)
    return _emit(_tape(a), -av, (a,), lambda g: (-g,))


def scale(a, c: float):
    av = _val(a)
    return _emit(_tape(a), av * c, (a,), lambda g: (g * c,))


def linear(x, w, b):
    """x (B, in) @ w (out, in)^T + b (out,) -> (B, out)."""
    xv, wv, bv = _val(x), _val(w), _val(b)
    out = xv @ wv.T + bv
    tape = _tape(x, w, b)
    if tape is None:
        return out

    def backward(g):
        return (g @ wv, g.T @ xv, g.sum(axis=0))

    return _emit(tape, out, (x, w, b), backward)


def dot_last(a, b):
    """Row-wise inner product -> (B, 1)."""
    av, bv = _val(a), _val(b)
    out = np.sum(av * bv, axis=-1, keepdims=True)
    tape = _tape(a, b)
    if tape is None:
        return out
    return _emit(tape, out, (a, b), lambda g: (g * bv, g * av))


def sum_last(a):
    av = _val(a)
    out = av.sum(axis=-1)
    return _emit(_tape(a), out, (a,),
                 lambda g: (np.broadcast_to(g[..., None], av.shape).copy(),))


def mean_last(a):
    av = _val(a)
    n = av.shape[-1]
    out = av.mean(axis=-1)
    return _emit(_tape(a), out, (a,),
                 lambda g: (np.broadcast_to(g[..., None] / n, av.shape).copy(),))


def mean_all(a):
    av = _val(a)
    out = np.asarray(av.mean())
    return _emit(_tape(a), out, (a,),
                 lambda g: (np.full(av.shape, float(g) / av.size),))


# -- nonlinearities ---------------------------------------------------------

def sigmoid(a):
    av = _val(a)
    out = 1.0 / (1.0 + np.exp(-av))
    return _emit(_tape(a), out, (a,), lambda g: (g * out * (1.0 - out),))


def tanh(a):
    av = _val(a)
    out = np.tanh(av)
    return _emit(_tape(a), out, (a,), lambda g: (g * (1.0 - out * out),))


def exp(a):
    av = _val(a)
    out = np.exp(av)
    return _emit(_tape(a), out, (a,), lambda g: (g * out,))


def log(a):
    av = _val(a)
    out = np.log(av)
    return _emit(_tape(a), out, (a,), lambda g: (g / av,))


def log1p(a):
    av = _val(a)
    out = np.log1p(av)
    return _emit(_tape(a), out, (a,), lambda g: (g / (1.0 + av),))


def prelu(x, slope):
    """Parametric ReLU with a single learnable slope (right derivative at 0)."""
    xv, sv = _val(x), _val(slope)
    pos = xv >= 0.0
    out = np.where(pos, xv, sv * xv)
    tape = _tape(x, slope)
    if tape is None:
        return out

    def backward(g):
        gx = g * np.where(pos, 1.0, sv)
        gs = np.array([np.sum(g * np.where(pos, 0.0, xv))])
        return (gx, gs)

    return _emit(tape, out, (x, slope), backward)


def clamp(x, lo: float, hi: float):
    """Clip to [lo, hi]; gradient passes inside the closed interval."""
    xv = _val(x)
    out = np.clip(xv, lo, hi)
    mask = (xv >= lo) & (xv <= hi)
    return _emit(_tape(x), out, (x,), lambda g: (g * mask,))


def softmax_last(x):
    xv = _val(x)
    shifted = xv - xv.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)
    tape = _tape(x)
    if tape is None:
        return out

    def backward(g):
        inner = np.sum(g * out, axis=-1, keepdims=True)
        return ((g - inner) * out,)

    return _emit(tape, out, (x,), backward)


def layernorm(x, gamma, beta, eps: float = 1e-5):
    xv, gv, bv = _val(x), _val(gamma), _val(beta)
    mu = xv.mean(axis=-1, keepdims=True)
    xc = xv - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = gv * xhat + bv
    tape = _tape(x, gamma, beta)
    if tape is None:
        return out

    def backward(g):
        gxhat = g * gv
        m1 = gxhat.mean(axis=-1, keepdims=True)
        m2 = np.mean(gxhat * xhat, axis=-1, keepdims=True)
        gx = inv * (gxhat - m1 - xhat * m2)
        axes = tuple(range(g.ndim - 1))
        return (gx, (g * xhat).sum(axis=axes), g.sum(axis=axes))

    return _emit(tape, out, (x, gamma, beta), backward)


# -- shape ops --------------------------------------------------------------

def concat_last(items):
    vals = [_val(x) for x in items]
    out = np.concatenate(vals, axis=-1)
    tape = _tape(*items)
    if tape is None:
        return out
    widths = [v.shape[-1] for v in vals]
    splits = np.cumsum(widths)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=-1))

    return _emit(tape, out, tuple(items), backward)


def slice_last(a, start: int, stop: int):
    av = _val(a)
    out = av[..., start:stop].copy()
    tape = _tape(a)
    if tape is None:
        return out

    def backward(g):
        full = np.zeros_like(av)
        full[..., start:stop] = g
        return (full,)

    return _emit(tape, out, (a,), backward)


def stack_scalars(items):
    """Pack (B,) scalars into (B, m) columns."""
    vals = [_val(x) for x in items]
    out = np.stack(vals, axis=-1)
    tape = _tape(*items)
    if tape is None:
        return out

    def backward(g):
        return tuple(g[..., i] for i in range(len(vals)))

    return _emit(tape, out, tuple(items), backward)


# -- complex (split layout) -------------------------------------------------

def _split(v):
    n = v.shape[-1] // 2
    return v[..., :n], v[..., n:]


def split_complex(v):
    """Split-layout array -> complex ndarray (value-level helper)."""
    re, im = _split(np.asarray(v))
    return re + 1j * im


def join_complex(z):
    """Complex ndarray -> split-layout float array (value-level helper)."""
    z = np.asarray(z, dtype=complex)
    return np.concatenate([z.real, z.imag], axis=-1)


def cmag(z):
    """Elementwise complex magnitude: (..., 2n) -> (..., n)."""
    zv = _val(z)
    re, im = _split(zv)
    out = np.hypot(re, im)
    tape = _tape(z)
    if tape is None:
        return out

    def backward(g):
        safe = np.maximum(out, _UNIT_FLOOR)
        return (np.concatenate([g * re / safe, g * im / safe], axis=-1),)

    return _emit(tape, out, (z,), backward)


def cunit(z):
    """Phase part z/|z| (zero stays zero): (..., 2n) -> (..., 2n)."""
    zv = _val(z)
    re, im = _split(zv)
    m = np.maximum(np.hypot(re, im), _UNIT_FLOOR)
    out = np.concatenate([re / m, im / m], axis=-1)
    tape = _tape(z)
    if tape is None:
        return out

    def backward(g):
        gre, gim = _split(g)
        m3 = m ** 3
        dre = (gre * (m * m - re * re) - gim * re * im) / m3
        dim = (-gre * re * im + gim * (m * m - im * im)) / m3
        return (np.concatenate([dre, dim], axis=-1),)

    return _emit(tape, out, (z,), backward)


def compress_c(z):
    """Magnitude compression ln(1 + |z|) e^{j angle(z)} with exact 0 -> 0.

    Primitive (not composed) so the gradient has the correct |z| -> 0 limit:
    the map tends to the identity near zero.
    """
    zv = _val(z)
    re, im = _split(zv)
    m = np.hypot(re, im)
    safe = np.maximum(m, _UNIT_FLOOR)
    f = np.where(m > 0.0, np.log1p(m) / safe, 1.0)
    out = np.concatenate([f * re, f * im], axis=-1)
    tape = _tape(z)
    if tape is None:
        return out

    def backward(g):
        gre, gim = _split(g)
        # d f / d m over m, with its finite m -> 0 limit handled by masking
        c3 = np.where(m > 1e-12,
                      (m / (1.0 + m) - np.log1p(m)) / np.maximum(m, 1e-12) ** 3,
                      -0.5)
        inner = gre * re + gim * im
        dre = f * gre + c3 * inner * re
        dim = f * gim + c3 * inner * im
        return (np.concatenate([dre, dim], axis=-1),)

    return _emit(tape, out, (z,), backward)


def rcmul(r, z):
    """Real (..., n) times complex (..., 2n): scales magnitude, keeps phase."""
    rv, zv = _val(r), _val(z)
    re, im = _split(zv)
    out = np.concatenate([rv * re, rv * im], axis=-1)
    tape = _tape(r, z)
    if tape is None:
        return out

    def backward(g):
        gre, gim = _split(g)
        return (gre * re + gim * im,
                np.concatenate([rv * gre, rv * gim], axis=-1))

    return _emit(tape, out, (r, z), backward)


def cmulc(z, c: np.ndarray):
    """Complex multiply by a constant complex row vector."""
    zv = _val(z)
    re, im = _split(zv)
    cr, ci = np.real(c), np.imag(c)
    out = np.concatenate([re * cr - im * ci, re * ci + im * cr], axis=-1)
    tape = _tape(z)
    if tape is None:
        return out

    def backward(g):
        gre, gim = _split(g)
        return (np.concatenate([gre * cr + gim * ci, -gre * ci + gim * cr], axis=-1),)

    return _emit(tape, out, (z,), backward)


def crep(z, reps: int):
    """Repeat each complex element `reps` times: (..., 2s) -> (..., 2 s reps)."""
    zv = _val(z)
    re, im = _split(zv)
    out = np.concatenate([np.repeat(re, reps, axis=-1), np.repeat(im, reps, axis=-1)], axis=-1)
    tape = _tape(z)
    if tape is None:
        return out
    s = re.shape[-1]

    def backward(g):
        gre, gim = _split(g)
        gre = gre.reshape(gre.shape[:-1] + (s, reps)).sum(axis=-1)
        gim = gim.reshape(gim.shape[:-1] + (s, reps)).sum(axis=-1)
        return (np.concatenate([gre, gim], axis=-1),)

    return _emit(tape, out, (z,), backward)


def fft_c(z):
    """Unnormalised FFT of a split-layout complex array along the last axis.

    Training-path throughput op: backed by numpy's FFT, which agrees with
    the radix-2 transform in dsp to ~1e-13 (cross-checked in the tests).
    """
    zv = _val(z)
    out = join_complex(np.fft.fft(split_complex(zv)))
    tape = _tape(z)
    if tape is None:
        return out

    def backward(g):
        return (join_complex(np.conj(np.fft.fft(np.conj(split_complex(g))))),)

    return _emit(tape, out, (z,), backward)


def ifft_c(z):
    """Normalised inverse FFT of a split-layout complex array."""
    zv = _val(z)
    zc = split_complex(zv)
    n = zc.shape[-1]
    out = join_complex(np.fft.ifft(zc))
    tape = _tape(z)
    if tape is None:
        return out

    def backward(g):
        return (join_complex(np.fft.fft(split_complex(g)) / n),)

    return _emit(tape, out, (z,), backward)


def hermitian_full(z, n_taps: int):
    """Half-spectrum (..., 2*(N/2)) -> full Hermitian spectrum (..., 2N).

    Bin 0 keeps only its real part and bin N/2 is zero, so the inverse FFT
    of the result is real; the imaginary slot of bin 0 gets zero gradient.
    """
    zv = _val(z)
    re, im = _split(zv)
    half = n_taps // 2
    if re.shape[-1] != half:
        raise ConfigurationError("half-spectrum width must be n_taps/2")
    re_f = np.zeros(re.shape[:-1] + (n_taps,))
    im_f = np.zeros_like(re_f)
    re_f[..., 0] = re[..., 0]
    re_f[..., 1:half] = re[..., 1:]
    re_f[..., half + 1 :] = re[..., 1:][..., ::-1]
    im_f[..., 1:half] = im[..., 1:]
    im_f[..., half + 1 :] = -im[..., 1:][..., ::-1]
    out = np.concatenate([re_f, im_f], axis=-1)
    tape = _tape(z)
    if tape is None:
        return out

    def backward(g):
        gre, gim = _split(g)
        dre = np.zeros(re.shape)
        dim = np.zeros(im.shape)
        dre[..., 0] = gre[..., 0]
        dre[..., 1:] = gre[..., 1:half] + gre[..., half + 1 :][..., ::-1]
        dim[..., 1:] = gim[..., 1:half] - gim[..., half + 1 :][..., ::-1]
        return (np.concatenate([dre, dim], axis=-1),)

    return _emit(tape, out, (z,), backward)


# -- plant-side ops ---------------------------------------------------------

def toeplitz_apply(w, blocks: np.ndarray):
    """Filter output block: out[b, r] = sum_l w[b, l] * blocks[b, r, l].

    `blocks` is a constant (B, R, N) array of newest-first reference windows.
    """
    wv = _val(w)
    out = np.einsum("brn,bn->br", blocks, wv)
    tape = _tape(w)
    if tape is None:
        return out

    def backward(g):
        return (np.einsum("br,brn->bn", g, blocks),)

    return _emit(tape, out, (w,), backward)


def fir_span(fy, kernel: np.ndarray, tail: np.ndarray, start: int):
    """Causal FIR of an in-window sequence plus a constant history tail.

    out[b, t] = sum_{l=0}^{min(start+t, L-1)} kernel[b, l] * fy[b, start+t-l]
                + tail[b, t]
    for t = 0 .. fy_width - start - 1.  `kernel` (B, L) and `tail` are
    constants; `fy` carries the gradient.
    """
    fv = _val(fy)
    L = kernel.shape[-1]
    width = fv.shape[-1]
    count = width - start
    out = tail[:, :count].astype(float).copy()
    for t in range(count):
        pos = start + t
        lo = max(0, pos - L + 1)
        seg = fv[:, lo : pos + 1]
        kern = kernel[:, : pos - lo + 1][:, ::-1]
        out[:, t] += np.einsum("bm,bm->b", seg, kern)
    tape = _tape(fy)
    if tape is None:
        return out

    def backward(g):
        gf = np.zeros_like(fv)
        for t in range(count):
            pos = start + t
            lo = max(0, pos - L + 1)
            kern = kernel[:, : pos - lo + 1][:, ::-1]
            gf[:, lo : pos + 1] += g[:, t : t + 1] * kern
        return (gf,)

    return _emit(tape, out, (fy,), backward)


def saturate_t(y, eta):
    """Loudspeaker saturation, elementwise; `eta` is a constant (np.inf rows
    degenerate to the identity, matching the linear mode)."""
    yv = _val(y)
    out = nse_value(yv, eta)
    tape = _tape(y)
    if tape is None:
        return out

    def backward(g):
        return (g * nse_slope(yv, eta),)

    return _emit(tape, out, (y,), backward)


def unitpad_fft_sqnorm(e, q: int):
    """Per-sample frequency-domain squared error: the squared norm of the
    Q-point FFT of [0, ..., 0, e_t] for every entry of `e` (B, T)."""
    ev = _val(e)
    padded = np.zeros(ev.shape + (q,), dtype=complex)
    padded[..., -1] = ev
    spec = np.fft.fft(padded)
    out = np.sum(spec.real ** 2 + spec.imag ** 2, axis=-1)
    tape = _tape(e)
    if tape is None:
        return out

    def backward(g):
        # the padded unit vector has flat unit-modulus spectrum: norm^2 = Q e^2
        return (g * 2.0 * q * ev,)

    return _emit(tape, out, (e,), backward)


# -- verification -----------------------------------------------------------

def grad_check(make_loss, params: dict, fd_step: float = 1e-6) -> float:
    """Max relative error between reverse-mode and central-difference grads.

    `make_loss` maps a dict of arrays-or-Tensors to a scalar.  It is called
    once on watched Tensors for the reverse pass and twice per perturbed
    entry for the differences.  The relative error denominator is
    max(|a|, |fd|, 1e-8).
    """
    tape = Tape()
    watched = {k: tape.watch(v) for k, v in params.items()}
    loss = make_loss(watched)
    tape.backward(loss)

    worst = 0.0
    for name, base in params.items():
        grad = watched[name].grad
        if grad is None:
            grad = np.zeros_like(base)
        work = {k: (v.copy() if k == name else v) for k, v in params.items()}
        flat = work[name].ravel()
        gflat = np.asarray(grad).ravel()
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + fd_step
            up = float(np.asarray(make_loss(work)))
            flat[i] = keep - fd_step
            down = float(np.asarray(make_loss(work)))
            flat[i] = keep
            fd = (up - down) / (2.0 * fd_step)
            denom = max(abs(gflat[i]), abs(fd), 1e-8)
            worst = max(worst, abs(gflat[i] - fd) / denom)
    return worst
