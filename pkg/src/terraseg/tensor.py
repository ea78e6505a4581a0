"""Dense tensor engine with reverse-mode automatic differentiation.

Implements exactly the forward operations and adjoints the segmentation
network needs: batched matmul, 2-D convolution, layer norm, softmax,
GELU, 2x upsampling, and a handful of structural ops (reshape, transpose,
concat, pad, slice, roll, take). Values are numpy arrays; float32 by
default, float64 on request (gradient checks run in double precision).

Every operation records its inputs when gradients are enabled; calling
``backward`` on a scalar loss walks the graph once in reverse topological
order and *adds* the resulting gradients into each tensor's ``grad``
accumulator, so two backward calls without clearing yield exactly twice
the gradients of one.
"""

from __future__ import annotations

import threading
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy.special import erf

from .errors import ConfigurationError, ShapeError, UsageError

DEFAULT_DTYPE = np.float32

_INV_SQRT2 = float(1.0 / np.sqrt(2.0))
_INV_SQRT2PI = float(1.0 / np.sqrt(2.0 * np.pi))

# Graph recording is a per-thread switch so concurrent inference threads
# cannot corrupt each other's (or a later trainer's) recording state.
_recording = threading.local()


def _grad_enabled() -> bool:
    return getattr(_recording, "enabled", True)


class no_grad:
    """Context manager that disables graph recording (inference mode)."""

    def __enter__(self):
        self._prev = _grad_enabled()
        _recording.enabled = False
        return self

    def __exit__(self, *exc):
        _recording.enabled = self._prev
        return False


def _as_array(data, dtype=None) -> np.ndarray:
    if isinstance(data, Tensor):
        data = data.data
    arr = np.asarray(data)
    if dtype is not None:
        return arr.astype(dtype, copy=False)
    if arr.dtype == np.float64 or arr.dtype == np.float32:
        return arr
    return arr.astype(DEFAULT_DTYPE)


class Tensor:
    """A numpy-backed value with an optional differentiation record.

    ``data`` holds the array, ``grad`` the accumulated gradient (same
    shape, lazily created), and ``_parents``/``_backward_fn`` link the
    tensor to the operation that produced it. The graph is acyclic by
    construction: an op's output is always a fresh tensor.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _as_array(data, dtype)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward_fn = None

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}{flag})"

    # -- operator sugar ------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_wrap(other, self.dtype), self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, k):
        return power(self, k)

    def __getitem__(self, key):
        return getitem(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def backward(self) -> None:
        backward(self)


def _wrap(value, dtype) -> "Tensor":
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype))


def _node(data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    """Build an op output, recording the graph only when gradients flow."""
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward_fn = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward_fn = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient down to ``shape`` (adjoint of numpy broadcasting)."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------


def _wrap2(a, b) -> tuple:
    if isinstance(a, Tensor):
        return a, _wrap(b, a.dtype)
    b = b if isinstance(b, Tensor) else Tensor(b)
    return _wrap(a, b.dtype), b


def add(a, b) -> Tensor:
    a, b = _wrap2(a, b)
    data = a.data + b.data

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = _wrap2(a, b)
    data = a.data - b.data

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _node(data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _wrap2(a, b)
    data = a.data * b.data
    ad, bd = a.data, b.data

    def bw(g):
        return _unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape)

    return _node(data, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = _wrap2(a, b)
    data = a.data / b.data
    ad, bd = a.data, b.data

    def bw(g):
        ga = _unbroadcast(g / bd, a.shape)
        gb = _unbroadcast(-g * ad / (bd * bd), b.shape)
        return ga, gb

    return _node(data, (a, b), bw)


def neg(a: Tensor) -> Tensor:
    return _node(-a.data, (a,), lambda g: (-g,))


def power(a: Tensor, k) -> Tensor:
    k = float(k)
    ad = a.data

    def bw(g):
        return (g * k * ad ** (k - 1.0),)

    return _node(ad**k, (a,), bw)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product ``a[..., m, k] @ b[..., k, n]``."""
    b = _wrap(b, a.dtype)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul requires rank >= 2 operands, got {a.shape} x {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} x {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul leading extents not broadcastable: {a.shape} x {b.shape}") from None
    ad, bd = a.data, b.data
    data = np.matmul(ad, bd)

    def bw(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(bd, -1, -2)), a.shape)
        gb = _unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), b.shape)
        return ga, gb

    return _node(data, (a, b), bw)


def _pair(v) -> tuple:
    if isinstance(v, (tuple, list)):
        if len(v) != 2:
            raise ConfigurationError(f"expected int or pair, got {v!r}")
        return int(v[0]), int(v[1])
    return int(v), int(v)


def _im2col(xp: np.ndarray, kh: int, kw: int, sh: int, sw: int, ho: int, wo: int) -> np.ndarray:
    n, c = xp.shape[:2]
    cols = np.empty((n, c, kh, kw, ho, wo), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i : i + sh * ho : sh, j : j + sw * wo : sw]
    return cols.reshape(n, c * kh * kw, ho * wo)


def _col2im(gcols: np.ndarray, xp_shape: tuple, kh: int, kw: int, sh: int, sw: int, ho: int, wo: int) -> np.ndarray:
    n, c = xp_shape[:2]
    gxp = np.zeros(xp_shape, dtype=gcols.dtype)
    gc = gcols.reshape(n, c, kh, kw, ho, wo)
    for i in range(kh):
        for j in range(kw):
            gxp[:, :, i : i + sh * ho : sh, j : j + sw * wo : sw] += gc[:, :, i, j]
    return gxp


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride=1, padding=0) -> Tensor:
    """2-D cross-correlation with bias, NCHW layout.

    Output extent (H + 2p - kh)/s + 1 must be a positive integer for both
    spatial axes; anything else is a configuration error.
    """
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and weight, got {x.shape} and {weight.shape}")
    n, cin, h, w = x.shape
    cout, cink, kh, kw = weight.shape
    if cin != cink:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape} vs weight {weight.shape}")
    if (h + 2 * ph - kh) % sh or (w + 2 * pw - kw) % sw:
        raise ConfigurationError(
            f"conv2d output extent not integral for input {h}x{w}, kernel {kh}x{kw}, "
            f"stride ({sh},{sw}), padding ({ph},{pw})"
        )
    ho = (h + 2 * ph - kh) // sh + 1
    wo = (w + 2 * pw - kw) // sw + 1
    if ho <= 0 or wo <= 0:
        raise ConfigurationError(f"conv2d kernel {kh}x{kw} does not fit padded input {h + 2 * ph}x{w + 2 * pw}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else x.data
    cols = _im2col(xp, kh, kw, sh, sw, ho, wo)
    wflat = weight.data.reshape(cout, -1)
    out = np.matmul(wflat, cols)
    if bias is not None:
        out = out + bias.data[:, None]
    out = out.reshape(n, cout, ho, wo)

    xp_shape = xp.shape
    parents = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        gflat = g.reshape(n, cout, ho * wo)
        gw = np.einsum("nol,nkl->ok", gflat, cols).reshape(weight.shape)
        gcols = np.matmul(wflat.T, gflat)
        gxp = _col2im(gcols, xp_shape, kh, kw, sh, sw, ho, wo)
        gx = gxp[:, :, ph : ph + h, pw : pw + w] if (ph or pw) else gxp
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return _node(out, parents, bw)


# ---------------------------------------------------------------------------
# normalization and activations
# ---------------------------------------------------------------------------


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis to zero mean / unit variance, then affine."""
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"layer_norm affine params must have shape ({c},), got {gamma.shape} and {beta.shape}")
    xd = x.data
    mean = xd.mean(axis=-1, keepdims=True)
    var = xd.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mean) * inv
    out = xhat * gamma.data + beta.data
    gd = gamma.data

    def bw(g):
        lead = tuple(range(g.ndim - 1))
        gbeta = g.sum(axis=lead)
        ggamma = (g * xhat).sum(axis=lead)
        gxhat = g * gd
        # d/dx of (x - mean)/sqrt(var + eps), all reductions over the last axis
        m1 = gxhat.mean(axis=-1, keepdims=True)
        m2 = (gxhat * xhat).mean(axis=-1, keepdims=True)
        gx = inv * (gxhat - m1 - xhat * m2)
        return gx, ggamma, gbeta

    return _node(out, (x, gamma, beta), bw)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Max-stabilized softmax along ``axis``; outputs sum to one."""
    xd = x.data
    shifted = xd - xd.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        gsum = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - gsum),)

    return _node(out, (x,), bw)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    xd = x.data
    shifted = xd - xd.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def bw(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _node(out, (x,), bw)


def gelu(x: Tensor) -> Tensor:
    """Exact-CDF GELU: x * Phi(x) with Phi the standard normal CDF."""
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd * _INV_SQRT2))
    out = xd * cdf

    def bw(g):
        pdf = np.exp(-0.5 * xd * xd) * _INV_SQRT2PI
        return (g * (cdf + xd * pdf),)

    return _node(out, (x,), bw)


# ---------------------------------------------------------------------------
# resampling
# ---------------------------------------------------------------------------

_bilinear_cache: dict = {}


def _bilinear_matrix(extent: int, dtype) -> np.ndarray:
    """Sparse-in-spirit (2E x E) interpolation matrix, align-corners-false."""
    key = (extent, np.dtype(dtype).name)
    cached = _bilinear_cache.get(key)
    if cached is not None:
        return cached
    m = np.zeros((2 * extent, extent), dtype=dtype)
    for o in range(2 * extent):
        src = max((o + 0.5) / 2.0 - 0.5, 0.0)
        i0 = int(np.floor(src))
        lam = src - i0
        i0 = min(i0, extent - 1)
        i1 = min(i0 + 1, extent - 1)
        m[o, i0] += 1.0 - lam
        m[o, i1] += lam
    _bilinear_cache[key] = m
    return m


def upsample2x(x: Tensor, mode: str = "nearest") -> Tensor:
    """Double both spatial extents of an NCHW tensor."""
    if x.ndim != 4:
        raise ShapeError(f"upsample2x expects 4-D input, got {x.shape}")
    n, c, h, w = x.shape
    if mode == "nearest":
        out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

        def bw(g):
            return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

        return _node(out, (x,), bw)
    if mode == "bilinear":
        mh = _bilinear_matrix(h, x.dtype)
        mw = _bilinear_matrix(w, x.dtype)
        out = np.matmul(np.matmul(mh, x.data), mw.T)

        def bw(g):
            return (np.matmul(np.matmul(mh.T, g), mw),)

        return _node(out, (x,), bw)
    raise ConfigurationError(f"unknown upsample mode {mode!r} (expected 'nearest' or 'bilinear')")


# ---------------------------------------------------------------------------
# structural ops
# ---------------------------------------------------------------------------


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    old = x.shape
    data = x.data.reshape(shape)
    return _node(data, (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    data = np.transpose(x.data, axes)
    return _node(data, (x,), lambda g: (np.transpose(g, inverse),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _node(data, tensors, bw)


def pad(x: Tensor, pad_width) -> Tensor:
    """Zero-pad; ``pad_width`` follows numpy's per-axis (before, after) form."""
    pad_width = tuple((int(a), int(b)) for a, b in pad_width)
    data = np.pad(x.data, pad_width)
    key = tuple(slice(a, a + ext) for (a, _), ext in zip(pad_width, x.shape))
    return _node(data, (x,), lambda g: (g[key],))


def getitem(x: Tensor, key) -> Tensor:
    """Basic (slice/int) indexing; the adjoint scatters into zeros."""
    data = x.data[key]
    shape = x.shape

    def bw(g):
        gx = np.zeros(shape, dtype=g.dtype)
        gx[key] = g
        return (gx,)

    return _node(data, (x,), bw)


def roll(x: Tensor, shifts, axes) -> Tensor:
    """Toroidal roll; exact inverse is rolling by the negated shifts."""
    shifts = tuple(int(s) for s in (shifts if isinstance(shifts, (tuple, list)) else (shifts,)))
    axes = tuple(int(a) for a in (axes if isinstance(axes, (tuple, list)) else (axes,)))
    data = np.roll(x.data, shifts, axes)
    inverse = tuple(-s for s in shifts)
    return _node(data, (x,), lambda g: (np.roll(g, inverse, axes),))


def take(x: Tensor, indices: np.ndarray, axis: int = 0) -> Tensor:
    """Gather rows along axis 0 (used for learned position-bias lookup)."""
    if axis != 0:
        raise UsageError("take supports axis 0 only")
    idx = np.asarray(indices)
    data = x.data[idx]
    shape = x.shape

    def bw(g):
        gx = np.zeros(shape, dtype=g.dtype)
        np.add.at(gx, idx, g)
        return (gx,)

    return _node(data, (x,), bw)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = x.data.sum(axis=axis, keepdims=keepdims)
    shape = x.shape

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, shape).astype(g.dtype, copy=True),)
        axes = axis if isinstance(axis, tuple) else (axis,)
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).astype(g.dtype, copy=True),)

    return _node(data, (x,), bw)


def tmean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = x.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([x.shape[a] for a in axes]))
    return mul(tsum(x, axis=axis, keepdims=keepdims), 1.0 / count)


# ---------------------------------------------------------------------------
# reverse pass
# ---------------------------------------------------------------------------


def _toposort(root: Tensor) -> list:
    order: list = []
    seen: set = set()
    stack: list = [(root, False)]
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(tensor) into ``grad`` for every reachable tensor.

    The pass computes gradients into a scratch map first and adds each
    tensor's total contribution to its accumulator exactly once, so
    repeated calls without clearing scale gradients linearly.
    """
    if loss.size != 1:
        raise UsageError(f"backward requires a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _toposort(loss)
    pending: dict = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        node.grad = g if node.grad is None else node.grad + g
        fn = node._backward_fn
        if fn is None:
            continue
        for parent, pg in zip(node._parents, fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            held = pending.get(id(parent))
            pending[id(parent)] = pg if held is None else held + pg


def zero_grads(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad = None
