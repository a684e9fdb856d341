"""Small double-precision neural-network core.

Tensors are channel-last with an optional leading batch axis: a 3D volume is
``(rows, cols, depth)`` and a batch is ``(batch, rows, cols, depth)``.
Convolutions are valid-region (no padding).  Every forward op has an exact
backward counterpart; there is no autodiff graph.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass
from typing import Mapping, MutableMapping

import numpy as np
import scipy.fft
from numpy.lib.stride_tricks import sliding_window_view

from .errors import LabelError, ShapeError

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None


@dataclass
class ConvSpec3D:
    weights: np.ndarray  # (kernels, kr, kc, kd)
    biases: np.ndarray  # (kernels,)
    stride: tuple[int, int, int] = (1, 1, 1)

    @property
    def kernel_count(self) -> int:
        return self.weights.shape[0]

    @property
    def kernel_dims(self) -> tuple[int, int, int]:
        return tuple(self.weights.shape[1:])


@dataclass
class PoolSpec3D:
    window: tuple[int, int, int]
    stride: tuple[int, int, int]


@dataclass
class DenseSpec:
    weights: np.ndarray  # (out, in)
    biases: np.ndarray  # (out,)

    @property
    def in_size(self) -> int:
        return self.weights.shape[1]

    @property
    def out_size(self) -> int:
        return self.weights.shape[0]


def output_dims(in_dims, kernel, stride) -> tuple[int, ...]:
    """floor((in - k) / s) + 1 per axis."""
    out = []
    for n, k, s in zip(in_dims, kernel, stride):
        if s < 1:
            raise ShapeError(f"strides must be >= 1, got {stride}")
        if k > n:
            raise ShapeError(f"kernel {tuple(kernel)} does not fit input {tuple(in_dims)}")
        out.append((n - k) // s + 1)
    return tuple(out)


def _batched(x: np.ndarray, ndim: int):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == ndim:
        return x[None], True
    if x.ndim == ndim + 1:
        return x, False
    raise ShapeError(f"expected a {ndim}-d tensor or a batch of them, got shape {x.shape}")


# --------------------------------------------------------------------------- conv3d


def _windows(x, kernel, stride):
    sr, sc, sd = stride
    return sliding_window_view(x, kernel, axis=(1, 2, 3))[:, ::sr, ::sc, ::sd]


def conv3d_forward(x: np.ndarray, spec: ConvSpec3D, method: str = "direct") -> np.ndarray:
    """Valid 3D cross-correlation.

    Returns one map per kernel: ``(kernels, r, c, d)`` for a single volume,
    ``(batch, kernels, r, c, d)`` for a batch.
    """
    xb, single = _batched(x, 3)
    output_dims(xb.shape[1:], spec.kernel_dims, spec.stride)
    if method == "fft":
        out = FFTConv3D(xb.shape[1:], spec.kernel_dims, spec.stride).forward(xb, spec)
    elif method == "direct":
        win = _windows(xb, spec.kernel_dims, spec.stride)
        out = np.tensordot(win, spec.weights, axes=([4, 5, 6], [1, 2, 3]))
        out = np.moveaxis(out, -1, 1) + spec.biases[None, :, None, None, None]
    else:
        raise ValueError(f"unknown convolution method {method!r}")
    return out[0] if single else out


def conv3d_backward(
    x: np.ndarray,
    spec: ConvSpec3D,
    upstream: np.ndarray,
    need_input_grad: bool = True,
    method: str = "direct",
):
    """Gradients of :func:`conv3d_forward` given ``d loss / d output``.

    Returns ``(weight_grads, bias_grads, input_grad)``; ``input_grad`` is None
    when not requested.
    """
    xb, single = _batched(x, 3)
    g = np.asarray(upstream, dtype=np.float64)
    if single:
        g = g[None]
    expect = (xb.shape[0], spec.kernel_count) + output_dims(xb.shape[1:], spec.kernel_dims, spec.stride)
    if g.shape != expect:
        raise ShapeError(f"upstream gradient has shape {g.shape}, expected {expect}")
    if method == "fft":
        plan = FFTConv3D(xb.shape[1:], spec.kernel_dims, spec.stride)
        dw, db, dx = plan.backward(xb, spec, g, need_input_grad)
        return dw, db, (dx[0] if single and dx is not None else dx)
    if method != "direct":
        raise ValueError(f"unknown convolution method {method!r}")

    db = g.sum(axis=(0, 2, 3, 4))
    win = _windows(xb, spec.kernel_dims, spec.stride)
    dw = np.tensordot(g, win, axes=([0, 2, 3, 4], [0, 1, 2, 3]))
    dx = None
    if need_input_grad:
        dx = np.zeros_like(xb)
        kr, kc, kd = spec.kernel_dims
        sr, sc, sd = spec.stride
        orr, oc, od = g.shape[2:]
        if orr * oc * od <= kr * kc * kd:
            # scatter one kernel-sized patch per output position
            for r in range(orr):
                for c in range(oc):
                    for d in range(od):
                        patch = np.tensordot(g[:, :, r, c, d], spec.weights, axes=(1, 0))
                        dx[:, r * sr : r * sr + kr, c * sc : c * sc + kc, d * sd : d * sd + kd] += patch
        else:
            # scatter one strided output-sized grid per kernel tap
            for i in range(kr):
                for j in range(kc):
                    for l in range(kd):
                        contrib = np.tensordot(g, spec.weights[:, i, j, l], axes=(1, 0))
                        dx[
                            :,
                            i : i + sr * (orr - 1) + 1 : sr,
                            j : j + sc * (oc - 1) + 1 : sc,
                            l : l + sd * (od - 1) + 1 : sd,
                        ] += contrib
        if single:
            dx = dx[0]
    return dw, db, dx


def _cmatmul_numpy(a, b, conj_a=False, conj_b=False):
    return np.matmul(np.conj(a) if conj_a else a, np.conj(b) if conj_b else b)


if numba is not None:

    @numba.njit(cache=True, fastmath=True)
    def _cmatmul_kernel(a, b, sa, sb, out, accr, acci):
        nf, m, n = a.shape
        p = b.shape[2]
        for f in range(nf):
            for i in range(m):
                accr[:] = 0.0
                acci[:] = 0.0
                for j in range(n):
                    xr = a[f, i, j].real
                    xi = sa * a[f, i, j].imag
                    for k in range(p):
                        yr = b[f, j, k].real
                        yi = sb * b[f, j, k].imag
                        accr[k] += xr * yr - xi * yi
                        acci[k] += xr * yi + xi * yr
                for k in range(p):
                    out[f, i, k] = accr[k] + 1j * acci[k]

    def _cmatmul(a, b, conj_a=False, conj_b=False):
        """Stacked complex matmul ``a[f] @ b[f]``, optionally conjugating.

        The stacks hold thousands of tiny matrices, where numpy's batched
        matmul is dominated by per-call overhead.  ``a`` may be a strided
        view; ``b`` is made contiguous so the inner loop vectorises.
        """
        b = np.ascontiguousarray(b)
        dtype = np.result_type(a, b)
        out = np.empty((a.shape[0], a.shape[1], b.shape[2]), dtype=dtype)
        real = np.finfo(dtype).dtype
        acc = np.empty(b.shape[2], dtype=real), np.empty(b.shape[2], dtype=real)
        one = real.type(1.0)
        _cmatmul_kernel(a, b, -one if conj_a else one, -one if conj_b else one, out, *acc)
        return out

else:  # pragma: no cover
    _cmatmul = _cmatmul_numpy


@functools.lru_cache(maxsize=64)
def _dft(n_out: int, n: int, dtype=np.complex128) -> np.ndarray:
    """First ``n_out`` rows of the length ``n`` inverse DFT matrix."""
    k = np.arange(n_out)[:, None]
    j = np.arange(n)[None, :]
    return (np.exp(2j * np.pi * k * j / n) / n).astype(dtype)


class FFTConv3D:
    """Strided valid 3D correlation computed in the Fourier domain.

    The stride is removed by polyphase splitting: input and kernel are each
    cut into ``sr*sc*sd`` sub-sampled phases, every phase pair becomes a
    stride-1 correlation, and the phase sum is taken before the inverse
    transform.  The FFT grid is just large enough that circular wrap-around
    never reaches a valid output.

    Internally the grid axes lead (``(*grid, batch, phase)``) so that each
    frequency owns a small contiguous ``batch x phase`` matrix.

    ``dtype=np.float32`` runs the spectral arithmetic in single precision
    (roughly twice as fast, relative error around 1e-6); results are always
    returned as float64.
    """

    def __init__(self, in_dims, kernel_dims, stride, dtype=np.float64):
        self.dtype = np.dtype(dtype)
        self.cdtype = np.result_type(self.dtype, np.complex64)
        self.in_dims = tuple(in_dims)
        self.kernel_dims = tuple(kernel_dims)
        self.stride = tuple(stride)
        self.out_dims = output_dims(in_dims, kernel_dims, stride)
        self.taps = tuple(-(-k // s) for k, s in zip(kernel_dims, stride))
        self.grid = tuple(o + t - 1 for o, t in zip(self.out_dims, self.taps))
        self.phases = [
            (a, b, c) for a in range(stride[0]) for b in range(stride[1]) for c in range(stride[2])
        ]

    def _split(self, t, dims):
        """(n, *dims) -> (*grid, n, phases), zero-filled past the data."""
        n = t.shape[0]
        (g0, g1, g2), (sr, sc, sd) = self.grid, self.stride
        if tuple(dims) == (g0 * sr, g1 * sc, g2 * sd):
            # phases tile the grid exactly: a single reshape-transpose copy
            r = t.reshape(n, g0, sr, g1, sc, g2, sd).transpose(1, 3, 5, 0, 2, 4, 6)
            return r.astype(self.dtype, order="C").reshape(self.grid + (n, len(self.phases)))
        out = np.zeros(self.grid + (n, len(self.phases)), dtype=self.dtype)
        for p, (a, b, c) in enumerate(self.phases):
            ph = t[:, a::sr, b::sc, c::sd][:, :g0, :g1, :g2]
            m0, m1, m2 = ph.shape[1:]
            out[:m0, :m1, :m2, :, p] = ph.transpose(1, 2, 3, 0)
        return out

    def _merge(self, ph, dims):
        """Inverse of :meth:`_split`: (*grid, n, phases) -> (n, *dims)."""
        n = ph.shape[3]
        out = np.zeros((n,) + tuple(dims))
        sr, sc, sd = self.stride
        for p, (a, b, c) in enumerate(self.phases):
            tgt = out[:, a::sr, b::sc, c::sd]
            m0, m1, m2 = (min(m, g) for m, g in zip(tgt.shape[1:], ph.shape[:3]))
            tgt[:, :m0, :m1, :m2] = ph[:m0, :m1, :m2, :, p].transpose(3, 0, 1, 2)
        return out

    def _fft(self, t):
        """Spectrum over the three leading axes, zero-padded to the grid.

        The last grid axis uses a real FFT, so the result has
        ``g0 * g1 * (g2 // 2 + 1)`` frequencies along its first axis.
        """
        f = scipy.fft.rfftn(t, s=self.grid, axes=(0, 1, 2))
        return f.reshape((-1,) + f.shape[3:])

    def _ifft(self, f, keep=None):
        """Inverse of :meth:`_fft`, returning only the leading ``keep`` block.

        The two leading axes are inverted by products with truncated inverse
        DFT matrices, so outputs that would be discarded are never computed.
        """
        g0, g1, g2 = self.grid
        k0, k1, k2 = keep or self.grid
        rest = f.shape[1:]
        f = f.reshape(g0, -1)
        f = _dft(k0, g0, dtype=self.cdtype) @ f
        f = np.matmul(_dft(k1, g1, dtype=self.cdtype), f.reshape(k0, g1, -1))
        f = f.reshape((k0, k1, g2 // 2 + 1) + rest)
        return scipy.fft.irfft(f, n=g2, axis=2)[:, :, :k2].astype(np.float64, copy=False)

    def transform_input(self, x):
        """Spectrum of ``x`` (batch, *in_dims), shape (freqs, batch, phases)."""
        return self._fft(self._split(x, self.in_dims))

    def transform_kernels(self, w):
        return self._fft(self._split(w, self.kernel_dims))

    def forward(self, x, spec: ConvSpec3D, xf=None):
        xf = self.transform_input(x) if xf is None else xf
        wf = self.transform_kernels(spec.weights)
        of = _cmatmul(xf, wf.transpose(0, 2, 1), conj_b=True)
        out = self._ifft(of, self.out_dims)
        return out.transpose(3, 4, 0, 1, 2) + spec.biases[None, :, None, None, None]

    def backward(self, x, spec: ConvSpec3D, g, need_input_grad=False, xf=None):
        xf = self.transform_input(x) if xf is None else xf
        gf = self._fft(g.transpose(2, 3, 4, 0, 1).astype(self.dtype, copy=False))  # (F, B, K)

        dwf = _cmatmul(gf.transpose(0, 2, 1), xf, conj_a=True)  # (F, K, P)
        dw = self._merge(self._ifft(dwf, self.taps), self.kernel_dims)
        db = g.sum(axis=(0, 2, 3, 4))

        dx = None
        if need_input_grad:
            wf = self.transform_kernels(spec.weights)  # (F, K, P)
            dx = self._merge(self._ifft(_cmatmul(gf, wf)), self.in_dims)
        return dw, db, dx


# --------------------------------------------------------------------------- pooling


def maxpool3d_forward(x: np.ndarray, spec: PoolSpec3D, strict: bool = True):
    """Windowed max; returns ``(output, argmax)``.

    ``argmax`` holds flat indices into each input volume (row-major), first
    occurrence in scan order on ties.
    """
    xb, single = _batched(x, 3)
    dims = xb.shape[1:]
    out_dims = output_dims(dims, spec.window, spec.stride)
    if strict and any((n - w) % s for n, w, s in zip(dims, spec.window, spec.stride)):
        raise ShapeError(f"pool window {spec.window} / stride {spec.stride} does not tile {dims}")
    win = _windows(xb, spec.window, spec.stride)[:, : out_dims[0], : out_dims[1], : out_dims[2]]
    flat = win.reshape(win.shape[:4] + (-1,))
    arg = np.argmax(flat, axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    i, j, l = np.unravel_index(arg, spec.window)
    r = np.arange(out_dims[0])[:, None, None] * spec.stride[0] + i
    c = np.arange(out_dims[1])[None, :, None] * spec.stride[1] + j
    d = np.arange(out_dims[2])[None, None, :] * spec.stride[2] + l
    idx = (r * dims[1] + c) * dims[2] + d
    if single:
        return out[0], idx[0]
    return out, idx


def maxpool3d_backward(argmax: np.ndarray, upstream: np.ndarray, input_dims) -> np.ndarray:
    """Route each upstream value to the input position that won its window."""
    argmax = np.asarray(argmax)
    g = np.asarray(upstream, dtype=np.float64)
    if argmax.shape != g.shape:
        raise ShapeError(f"argmax shape {argmax.shape} differs from upstream {g.shape}")
    single = g.ndim == 3
    if single:
        argmax, g = argmax[None], g[None]
    bsz = g.shape[0]
    dx = np.zeros((bsz, int(np.prod(input_dims))))
    rows = np.broadcast_to(np.arange(bsz)[:, None, None, None], argmax.shape)
    np.add.at(dx, (rows.ravel(), argmax.ravel()), g.ravel())
    dx = dx.reshape((bsz,) + tuple(input_dims))
    return dx[0] if single else dx


# --------------------------------------------------------------------------- 2D layers


def conv2d_forward(x: np.ndarray, spec: ConvSpec3D) -> np.ndarray:
    """2D convolution over ``(rows, cols, channels)``; every kernel spans all
    input channels (``spec.weights`` is ``(kernels, kh, kw, channels)``).
    Output is ``(rows', cols', kernels)``."""
    xb, single = _batched(x, 3)
    if spec.weights.shape[3] != xb.shape[3]:
        raise ShapeError(f"kernels span {spec.weights.shape[3]} channels, input has {xb.shape[3]}")
    s = ConvSpec3D(spec.weights, spec.biases, (spec.stride[0], spec.stride[1], 1))
    out = conv3d_forward(xb, s)[:, :, :, :, 0].transpose(0, 2, 3, 1)
    return out[0] if single else out


def conv2d_backward(x, spec: ConvSpec3D, upstream, need_input_grad: bool = True):
    xb, single = _batched(x, 3)
    g = np.asarray(upstream, dtype=np.float64)
    if single:
        g = g[None]
    s = ConvSpec3D(spec.weights, spec.biases, (spec.stride[0], spec.stride[1], 1))
    dw, db, dx = conv3d_backward(xb, s, g.transpose(0, 3, 1, 2)[..., None], need_input_grad)
    if single and dx is not None:
        dx = dx[0]
    return dw, db, dx


def maxpool2d_forward(x: np.ndarray, window=(2, 2), stride=(2, 2), strict: bool = True):
    """Per-channel spatial max pool on ``(rows, cols, channels)`` tensors."""
    return maxpool3d_forward(x, PoolSpec3D((window[0], window[1], 1), (stride[0], stride[1], 1)), strict)


def maxpool2d_backward(argmax, upstream, input_dims) -> np.ndarray:
    return maxpool3d_backward(argmax, upstream, input_dims)


# --------------------------------------------------------------------------- dense / activations


def dense_forward(x: np.ndarray, spec: DenseSpec) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != spec.in_size:
        raise ShapeError(f"dense layer expects {spec.in_size} inputs, got {x.shape[-1]}")
    return x @ spec.weights.T + spec.biases


def dense_backward(x: np.ndarray, spec: DenseSpec, upstream: np.ndarray):
    """Returns ``(weight_grads, bias_grads, input_grad)`` for y = W x + b."""
    x = np.asarray(x, dtype=np.float64)
    g = np.asarray(upstream, dtype=np.float64)
    if g.shape[-1] != spec.out_size or g.shape[:-1] != x.shape[:-1]:
        raise ShapeError(f"upstream gradient shape {g.shape} does not match the layer")
    x2 = x.reshape(-1, spec.in_size)
    g2 = g.reshape(-1, spec.out_size)
    return g2.T @ x2, g2.sum(axis=0), g @ spec.weights


def relu_forward(x):
    return np.maximum(x, 0.0)


def relu_backward(x, upstream):
    """Subgradient 0 at exactly 0."""
    return np.where(np.asarray(x) > 0, upstream, 0.0)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(probs: np.ndarray, labels):
    """Mean negative log-likelihood and its gradient w.r.t. the logits.

    Accepts one probability vector with an integer label, or a batch.
    """
    p = np.asarray(probs, dtype=np.float64)
    single = p.ndim == 1
    p2 = p[None] if single else p
    y = np.atleast_1d(np.asarray(labels))
    if y.shape != (p2.shape[0],):
        raise LabelError(f"{y.shape[0]} labels for {p2.shape[0]} score vectors")
    if not np.issubdtype(y.dtype, np.integer) or np.any(y < 0) or np.any(y >= p2.shape[1]):
        raise LabelError(f"labels must be integers in [0, {p2.shape[1]})")
    rows = np.arange(p2.shape[0])
    picked = np.maximum(p2[rows, y], np.finfo(np.float64).tiny)
    loss = float(-np.log(picked).mean())
    grad = p2.copy()
    grad[rows, y] -= 1.0
    grad /= p2.shape[0]
    return loss, (grad[0] if single else grad)


# --------------------------------------------------------------------------- init / optimiser


def xavier_bound(fan_in: int, fan_out: int) -> float:
    return float(np.sqrt(6.0 / (fan_in + fan_out)))


def xavier_init(fan_in: int, fan_out: int, rng_seed=0, shape=None) -> np.ndarray:
    """Glorot-normalised uniform weights on [-a, a], a = sqrt(6 / (fan_in + fan_out)).

    ``rng_seed`` may be an int or a ``numpy.random.Generator``.  ``shape``
    defaults to ``(fan_out, fan_in)``.
    """
    if fan_in <= 0 or fan_out <= 0:
        raise ValueError("fans must be positive")
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    a = xavier_bound(fan_in, fan_out)
    return rng.uniform(-a, a, size=shape if shape is not None else (fan_out, fan_in))


def sgd_step(
    params: MutableMapping[str, np.ndarray], grads: Mapping[str, np.ndarray], learning_rate: float
) -> MutableMapping[str, np.ndarray]:
    """Plain SGD, in place: ``p -= learning_rate * g`` for every key in ``grads``."""
    for name, g in grads.items():
        p = params[name]
        if np.shape(g) != np.shape(p):
            raise ShapeError(f"gradient for {name!r} has shape {np.shape(g)}, parameter {np.shape(p)}")
        p -= learning_rate * g
    return params
