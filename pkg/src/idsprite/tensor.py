"""Minimal tensor engine with reverse-mode autodiff, numpy-backed.

Scope is exactly what the nets in this package need: broadcast
arithmetic, batched matmul, fused softmax / layer norm / SiLU, 3x3 and
1x1 convolution via im2col, 2x2 average pooling, nearest-neighbour
upsampling, slicing, concat and row gather. Storage is float32 by
default; reductions accumulate in float64 before casting back. A
float64 storage mode (``astype``) exists for gradient verification.

Tensors produced by ops are treated as immutable. Parameter tensors are
plain leaves whose ``.data`` the optimizer updates in place between
steps; nothing here is thread-safe and nothing needs to be.
"""

from __future__ import annotations

import struct
from contextlib import contextmanager

import numpy as np

DEFAULT_DTYPE = np.float32


class ShapeError(ValueError):
    """Operands have incompatible or unexpected dimensions."""


class NumericError(ArithmeticError):
    """A non-finite value appeared where finiteness is required."""


class DomainError(ValueError):
    """Input is outside the mathematical domain of the operation."""


class FormatError(ValueError):
    """A serialized tensor file is malformed."""


_GRAD_ENABLED = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block (inference / FD probes)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._vjp = None

    # -- bookkeeping ------------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, shape {self.shape}")
        return float(self.data.reshape(())[()])

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad)

    def requires_grad_(self, flag: bool = True) -> "Tensor":
        self.requires_grad = flag
        return self

    def assert_finite(self, context: str = "tensor") -> "Tensor":
        if not np.all(np.isfinite(self.data)):
            raise NumericError(f"non-finite values in {context}")
        return self

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, grad={self.requires_grad})"

    # -- autodiff ----------------------------------------------------------
    def backward(self):
        if self.data.size != 1:
            raise ShapeError("backward() requires a scalar loss")
        order = _toposort(self)
        self.grad = np.ones_like(self.data)
        for node in order:
            if node._vjp is None or node.grad is None:
                continue
            for parent, g in zip(node._parents, node._vjp(node.grad)):
                if g is None or not parent.requires_grad:
                    continue
                if parent.grad is None:
                    parent.grad = g
                else:
                    parent.grad = parent.grad + g

    # -- operator sugar ----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, k):
        return pow_scalar(self, k)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def permute(self, *axes):
        return permute(self, axes if len(axes) > 1 else axes[0])

    def swapaxes(self, a, b):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return permute(self, tuple(axes))

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def narrow(self, axis, start, length):
        return narrow(self, axis, start, length)


def _toposort(root: Tensor):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    order.reverse()
    return order


def _wrap(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else DEFAULT_DTYPE
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data, parents, vjp) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjp = vjp
    else:
        out.requires_grad = False
        out._parents = ()
        out._vjp = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum gradient ``g`` down to ``shape`` (inverse of numpy broadcast)."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- arithmetic -------------------------------------------------------------

def add(a, b) -> Tensor:
    a = _wrap(a, b if isinstance(b, Tensor) else None)
    b = _wrap(b, a)
    out = a.data + b.data

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(out, (a, b), vjp)


def sub(a, b) -> Tensor:
    a = _wrap(a, b if isinstance(b, Tensor) else None)
    b = _wrap(b, a)
    out = a.data - b.data

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(out, (a, b), vjp)


def mul(a, b) -> Tensor:
    a = _wrap(a, b if isinstance(b, Tensor) else None)
    b = _wrap(b, a)
    out = a.data * b.data

    def vjp(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(out, (a, b), vjp)


def div(a, b) -> Tensor:
    a = _wrap(a, b if isinstance(b, Tensor) else None)
    b = _wrap(b, a)
    out = a.data / b.data

    def vjp(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return _make(out, (a, b), vjp)


def pow_scalar(a: Tensor, k) -> Tensor:
    k = float(k)
    out = a.data ** k

    def vjp(g):
        return (g * k * a.data ** (k - 1.0),)

    return _make(out, (a,), vjp)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs 2-D or higher operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def vjp(g):
        ga = _unbroadcast(g @ b.data.swapaxes(-1, -2), a.shape)
        gb = _unbroadcast(a.data.swapaxes(-1, -2) @ g, b.shape)
        return ga, gb

    return _make(out, (a, b), vjp)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x @ w (+ b), with w of shape (in, out)."""
    y = matmul(x, w)
    return y if b is None else add(y, b)


# -- shape ops ---------------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    out = a.data.reshape(shape)

    def vjp(g):
        return (g.reshape(old),)

    return _make(out, (a,), vjp)


def permute(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = a.data.transpose(axes)

    def vjp(g):
        return (g.transpose(inv),)

    return _make(out, (a,), vjp)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    if not (0 <= start and start + length <= a.shape[axis]):
        raise ShapeError(f"narrow [{start}:{start + length}] out of range for axis {axis} of {a.shape}")
    idx = tuple(slice(None) if i != axis % a.ndim else slice(start, start + length)
                for i in range(a.ndim))
    out = a.data[idx]

    def vjp(g):
        full = np.zeros_like(a.data)
        full[idx] = g
        return (full,)

    return _make(out, (a,), vjp)


def concat(tensors, axis: int) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(out, tuple(tensors), vjp)


# -- reductions ---------------------------------------------------------------

def _axis_tuple(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        return (axis % ndim,)
    return tuple(a % ndim for a in axis)


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = _axis_tuple(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims, dtype=np.float64).astype(a.data.dtype)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).astype(a.data.dtype),)

    return _make(out, (a,), vjp)


def tmean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = _axis_tuple(axis, a.ndim)
    n = int(np.prod([a.shape[i] for i in axes]))
    out = a.data.mean(axis=axes, keepdims=keepdims, dtype=np.float64).astype(a.data.dtype)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / n, a.shape).astype(a.data.dtype),)

    return _make(out, (a,), vjp)


# -- nonlinearities -----------------------------------------------------------

def _sigmoid(x: np.ndarray) -> np.ndarray:
    # exp of -|x| never overflows; the two branches share it
    z = np.exp(-np.abs(x))
    inv = 1.0 / (1.0 + z)
    return np.where(x >= 0, inv, 1.0 - inv)


def silu(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)
    out = a.data * s

    def vjp(g):
        return (g * s * (1.0 + a.data * (1.0 - s)),)

    return _make(out, (a,), vjp)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Max-subtracted softmax along ``axis``; rows sum to 1."""
    m = a.data.max(axis=axis, keepdims=True)
    e = np.exp(a.data - m)
    z = e.sum(axis=axis, keepdims=True)
    y = e
    y /= z

    def vjp(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - dot),)

    return _make(y, (a,), vjp)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, axis=-1, eps: float = 1e-5) -> Tensor:
    axes = _axis_tuple(axis, x.ndim)
    n = int(np.prod([x.shape[i] for i in axes]))
    mu = x.data.mean(axis=axes, keepdims=True)
    xc = x.data - mu
    var = np.square(xc).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + np.asarray(eps, dtype=x.data.dtype))
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def vjp(g):
        dxhat = g * gamma.data
        m1 = dxhat.mean(axis=axes, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=axes, keepdims=True)
        gx = inv * (dxhat - m1 - xhat * m2)
        ggamma = _unbroadcast(g * xhat, gamma.shape)
        gbeta = _unbroadcast(g, beta.shape)
        return gx, ggamma, gbeta

    return _make(out, (x, gamma, beta), vjp)


# -- spatial ops ---------------------------------------------------------------

def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, pad: int | None = None) -> Tensor:
    """Stride-1 2-D convolution, NCHW, via im2col. ``pad`` defaults to 'same'."""
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and kernel, got {x.shape}, {w.shape}")
    bsz, cin, h, wd = x.shape
    cout, cin2, kh, kw = w.shape
    if cin != cin2:
        raise ShapeError(f"conv2d channel mismatch: input {cin}, kernel {cin2}")
    if pad is None:
        pad = kh // 2
    hp, wp = h + 2 * pad, wd + 2 * pad
    ho, wo = hp - kh + 1, wp - kw + 1
    # im2col in channels-last space: the inner copies move contiguous
    # C-sized blocks, and the GEMM operands need no further reordering
    xt = np.empty((bsz, hp, wp, cin), dtype=x.data.dtype)
    if pad:
        xt[:, :pad] = 0.0
        xt[:, pad + h:] = 0.0
        xt[:, pad:pad + h, :pad] = 0.0
        xt[:, pad:pad + h, pad + wd:] = 0.0
    xt[:, pad:pad + h, pad:pad + wd, :] = np.moveaxis(x.data, 1, 3)
    if cin >= 8:
        # one strided gather beats the 9 scatter-writes once rows are wide
        sw = np.lib.stride_tricks.sliding_window_view(xt, (kh, kw), axis=(1, 2))
        cols2 = sw.transpose(0, 1, 2, 4, 5, 3).reshape(bsz * ho * wo, kh * kw * cin)
    else:
        cols = np.empty((bsz, ho, wo, kh, kw, cin), dtype=x.data.dtype)
        for i in range(kh):
            for j in range(kw):
                cols[:, :, :, i, j, :] = xt[:, i:i + ho, j:j + wo, :]
        cols2 = cols.reshape(bsz * ho * wo, kh * kw * cin)
    wmat = np.ascontiguousarray(w.data.transpose(2, 3, 1, 0).reshape(kh * kw * cin, cout))
    # (Cout, B*Ho*Wo) result makes the NCHW restore a block-wise copy
    flat = wmat.T @ cols2.T
    if b is not None:
        flat += b.data[:, None]
    out = np.ascontiguousarray(flat.reshape(cout, bsz, ho * wo).transpose(1, 0, 2)).reshape(
        bsz, cout, ho, wo)

    need_gx = x.requires_grad

    def vjp(g):
        gmat = np.ascontiguousarray(g.reshape(bsz, cout, ho * wo).transpose(1, 0, 2)).reshape(
            cout, bsz * ho * wo)
        gw = (gmat @ cols2).reshape(cout, kh, kw, cin).transpose(0, 3, 1, 2)
        gb = g.sum(axis=(0, 2, 3), dtype=np.float64).astype(g.dtype) if b is not None else None
        gx = None
        if need_gx:
            gcols = (gmat.T @ wmat.T).reshape(bsz, ho, wo, kh, kw, cin)
            if cin >= 8:
                # contiguous reads for the overlapping adds below
                gcols = np.ascontiguousarray(gcols.transpose(3, 4, 0, 1, 2, 5))
                taps = lambda i, j: gcols[i, j]
            else:
                taps = lambda i, j: gcols[:, :, :, i, j, :]
            gxt = np.zeros((bsz, hp, wp, cin), dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxt[:, i:i + ho, j:j + wo, :] += taps(i, j)
            gx = np.moveaxis(gxt[:, pad:pad + h, pad:pad + wd, :], 3, 1)
        parents_g = (gx, gw) if b is None else (gx, gw, gb)
        return parents_g

    parents = (x, w) if b is None else (x, w, b)
    return _make(out, parents, vjp)


def avg_pool2d(x: Tensor) -> Tensor:
    """2x2 average pooling, stride 2. Spatial dims must be even."""
    bsz, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"avg_pool2d needs even spatial dims, got {x.shape}")
    x6 = x.data.reshape(bsz, c, h // 2, 2, w // 2, 2)
    out = (x6[:, :, :, 0, :, 0] + x6[:, :, :, 0, :, 1] + x6[:, :, :, 1, :, 0]
           + x6[:, :, :, 1, :, 1])
    out *= np.asarray(0.25, dtype=x.data.dtype)

    def vjp(g):
        up = np.repeat(np.repeat(g, 2, axis=2), 2, axis=3)
        return ((up * 0.25).astype(x.data.dtype),)

    return _make(out, (x,), vjp)


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbour 2x spatial upsampling."""
    bsz, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

    def vjp(g):
        g6 = g.reshape(bsz, c, h, 2, w, 2)
        return (g6[:, :, :, 0, :, 0] + g6[:, :, :, 0, :, 1] + g6[:, :, :, 1, :, 0]
                + g6[:, :, :, 1, :, 1],)

    return _make(out, (x,), vjp)


def gather_rows(table: Tensor, ids: np.ndarray) -> Tensor:
    """Index rows of a (V, C) table with an integer array; output ids.shape + (C,)."""
    ids = np.asarray(ids)
    if ids.min(initial=0) < 0 or (ids.size and ids.max() >= table.shape[0]):
        raise ShapeError(f"gather_rows ids out of range for table with {table.shape[0]} rows")
    out = table.data[ids]

    def vjp(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        return (gt,)

    return _make(out, (table,), vjp)


# -- linear algebra helpers ----------------------------------------------------

def matrix_sqrt_psd(a, neg_tol: float = 1e-8) -> Tensor:
    """Principal square root of a symmetric PSD matrix via eigendecomposition.

    The input is symmetrized internally; eigenvalues in (-neg_tol, 0) are
    clamped to zero, anything more negative raises ``DomainError``.
    """
    arr = a.data if isinstance(a, Tensor) else np.asarray(a)
    if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
        raise ShapeError(f"matrix_sqrt_psd needs a square matrix, got {arr.shape}")
    m = arr.astype(np.float64)
    m = (m + m.T) / 2.0
    w, v = np.linalg.eigh(m)
    if w.min(initial=0.0) < -neg_tol:
        raise DomainError(f"matrix is not PSD: min eigenvalue {w.min():.3e}")
    w = np.clip(w, 0.0, None)
    r = (v * np.sqrt(w)) @ v.T
    r = (r + r.T) / 2.0
    out_dtype = arr.dtype if arr.dtype in (np.float32, np.float64) else np.float64
    return Tensor(r.astype(out_dtype))


# -- TNSR file format -----------------------------------------------------------

_TNSR_MAGIC = b"TNSR"


def save_tnsr(path, t) -> None:
    """Write a tensor: magic 'TNSR', u32 LE rank, u32 LE dims, float32 LE payload."""
    arr = np.asarray(t.data if isinstance(t, Tensor) else t, dtype=np.float32)
    if arr.ndim:
        arr = np.ascontiguousarray(arr)
    with open(path, "wb") as fh:
        fh.write(_TNSR_MAGIC)
        fh.write(struct.pack("<I", arr.ndim))
        if arr.ndim:
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(arr.astype("<f4").tobytes(order="C"))


def load_tnsr(path) -> Tensor:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != _TNSR_MAGIC:
        raise FormatError(f"{path}: bad magic {blob[:4]!r}")
    if len(blob) < 8:
        raise FormatError(f"{path}: truncated header")
    (rank,) = struct.unpack_from("<I", blob, 4)
    if rank > 32:
        raise FormatError(f"{path}: implausible rank {rank}")
    head = 8 + 4 * rank
    if len(blob) < head:
        raise FormatError(f"{path}: truncated dims")
    dims = struct.unpack_from(f"<{rank}I", blob, 8) if rank else ()
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    expected = head + 4 * count
    if len(blob) != expected:
        raise FormatError(f"{path}: payload is {len(blob) - head} bytes, expected {4 * count}")
    arr = np.frombuffer(blob, dtype="<f4", count=count, offset=head).reshape(dims)
    return Tensor(arr.astype(np.float32))


def zeros(shape, dtype=DEFAULT_DTYPE, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)


def ones(shape, dtype=DEFAULT_DTYPE, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=requires_grad)
