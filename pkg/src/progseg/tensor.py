"""Dense tensors with reverse-mode automatic differentiation.

Every operation on a :class:`Tensor` that involves at least one input with
``requires_grad`` records a node (its parents and a closure that pushes the
output gradient back to them). :func:`backward` orders the recorded nodes
topologically and visits each exactly once in reverse.

Arrays are numpy ``float32`` by default. Operations keep the dtype of their
inputs, so a graph built from ``float64`` tensors runs in double precision;
:func:`grad_check` relies on that.

Reductions use numpy's fixed summation order, so repeated runs on the same
build are bit-identical.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, ShapeError

DTYPE = np.float32

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Rng:
    """Seeded PCG64 stream (numpy's documented, platform-stable generator).

    ``spawn(tag)`` derives an independent child stream from the seed and a
    string tag, so adding a consumer never perturbs the draws of another.
    """

    def __init__(self, seed: int, tag: str = ""):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.tag = tag
        words = [self.seed & 0xFFFFFFFF, self.seed >> 32]
        words += [b for b in tag.encode("utf-8")]
        self.gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence(words)))

    def spawn(self, tag: str) -> "Rng":
        return Rng(self.seed, f"{self.tag}/{tag}" if self.tag else tag)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self.gen.normal(loc, scale, size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.gen.uniform(low, high, size)

    def integers(self, low, high=None, size=None):
        return self.gen.integers(low, high, size)

    def permutation(self, n):
        return self.gen.permutation(n)

    def get_state(self) -> dict:
        return self.gen.bit_generator.state

    def set_state(self, state: dict) -> None:
        self.gen.bit_generator.state = state


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            arr = np.asarray(data)
            dtype = arr.dtype if arr.dtype in (np.float32, np.float64) else DTYPE
        self.data = np.ascontiguousarray(data, dtype=dtype)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None
        self.op = "leaf"

    # -- basic properties -------------------------------------------------
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

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    # -- operators --------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return power(self, p)

    def sum(self, axes=None, keepdims=False):
        return reduce_sum(self, axes, keepdims)

    def mean(self, axes=None, keepdims=False):
        return reduce_mean(self, axes, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def backward(self):
        backward(self)


@dataclass
class Graph:
    """Topologically ordered record of the nodes reachable from a loss."""

    nodes: list = field(default_factory=list)

    @classmethod
    def trace(cls, loss: Tensor) -> "Graph":
        order, seen = [], set()
        stack = [(loss, False)]
        while stack:
            t, expanded = stack.pop()
            if expanded:
                order.append(t)
                continue
            if id(t) in seen:
                continue
            seen.add(id(t))
            stack.append((t, True))
            for p in t._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        return cls(order)


def backward(loss: Tensor, graph: Graph | None = None) -> None:
    """Populate ``.grad`` of every ``requires_grad`` tensor feeding ``loss``.

    Gradients accumulate into existing ``.grad`` buffers, so a leaf used on
    several branches (or in several backward calls) receives their sum.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if graph is None:
        graph = Graph.trace(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(graph.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# -- helpers ---------------------------------------------------------------
def _as_tensor(x, dtype=DTYPE) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype), dtype=dtype)


def _make(data, parents, backward_fn, op) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._parents = ()
    out._backward = None
    out.op = op
    needs = _grad_enabled and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# -- elementwise arithmetic -----------------------------------------------
def add(a, b) -> Tensor:
    """Elementwise sum; numpy trailing-dimension broadcasting applies."""
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    _broadcast_shape(a, b, "add")
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    _broadcast_shape(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    _broadcast_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
                 "mul")


def div(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    _broadcast_shape(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g / bd, ad.shape),
                            _unbroadcast(-g * out / bd, bd.shape)),
                 "div")


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def scale(a: Tensor, c: float) -> Tensor:
    c = a.dtype.type(c)
    return _make(a.data * c, (a,), lambda g: (g * c,), "scale")


def power(a: Tensor, p: float) -> Tensor:
    ad = a.data
    p = ad.dtype.type(p)
    return _make(ad ** p, (a,), lambda g: (g * p * ad ** (p - 1),), "pow")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    ad = a.data
    return _make(np.log(ad), (a,), lambda g: (g / ad,), "log")


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def abs(a: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    ad = a.data
    return _make(np.abs(ad), (a,), lambda g: (g * np.sign(ad),), "abs")


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clip to [lo, hi]; gradient passes only where the input was inside."""
    ad = a.data
    inside = ((ad >= lo) & (ad <= hi)).astype(ad.dtype)
    return _make(np.clip(ad, lo, hi), (a,), lambda g: (g * inside,), "clamp")


# -- activations ------------------------------------------------------------
def relu(a: Tensor) -> Tensor:
    ad = a.data
    pos = ad > 0
    return _make(np.where(pos, ad, 0).astype(ad.dtype), (a,),
                 lambda g: (g * pos,), "relu")


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    ad = a.data
    factor = np.where(ad > 0, 1.0, slope).astype(ad.dtype)
    return _make(ad * factor, (a,), lambda g: (g * factor,), "leaky_relu")


def sigmoid(a: Tensor) -> Tensor:
    ad = a.data
    out = np.empty_like(ad)
    pos = ad >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-ad[pos]))
    e = np.exp(ad[~pos])
    out[~pos] = e / (1.0 + e)
    return _make(out, (a,), lambda g: (g * out * (1 - out),), "sigmoid")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1 - out * out),), "tanh")


# -- linear algebra and reductions ----------------------------------------
def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D matrix product; backward is dA = dC·Bᵀ, dB = Aᵀ·dC."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    return _make(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g), "matmul")


def _norm_axes(axes, ndim):
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise ShapeError(f"axis {ax} out of range for {ndim}-d tensor")
        out.append(ax % ndim)
    if len(set(out)) != len(out):
        raise ShapeError(f"repeated axis in {axes}")
    return tuple(sorted(out))


def reduce_sum(a: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axes, a.ndim)
    shape = a.shape
    kept = tuple(1 if i in axes else n for i, n in enumerate(shape))

    def bw(g):
        return (np.broadcast_to(g.reshape(kept), shape).copy(),)

    out = a.data.sum(axis=axes, keepdims=keepdims)
    return _make(np.asarray(out, dtype=a.dtype), (a,), bw, "sum")


def reduce_mean(a: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axes, a.ndim)
    n = 1
    for ax in axes:
        n *= a.shape[ax]
    return scale(reduce_sum(a, axes, keepdims), 1.0 / n)


# -- shape manipulation -----------------------------------------------------
def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {src} to {shape}") from None
    return _make(out, (a,), lambda g: (g.reshape(src),), "reshape")


def transpose(a: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)
    return _make(np.ascontiguousarray(a.data.transpose(axes)), (a,),
                 lambda g: (g.transpose(inv),), "transpose")


def concat(tensors, axis: int = 0) -> Tensor:
    ref = tensors[0].shape
    ndim = len(ref)
    axis = axis % ndim
    for t in tensors[1:]:
        if t.ndim != ndim or any(t.shape[i] != ref[i] for i in range(ndim) if i != axis):
            raise ShapeError(f"concat: shapes {[t.shape for t in tensors]} differ off axis {axis}")
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        idx = [slice(None)] * ndim
        parts = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            idx[axis] = slice(lo, hi)
            parts.append(g[tuple(idx)])
        return parts

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), bw, "concat")


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Slice ``[start, start + length)`` along ``axis``."""
    axis = axis % a.ndim
    if start < 0 or length < 0 or start + length > a.shape[axis]:
        raise ShapeError(f"narrow: [{start}, {start + length}) outside axis of size {a.shape[axis]}")
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)

    def bw(g):
        full = np.zeros(a.shape, dtype=g.dtype)
        full[idx] = g
        return (full,)

    return _make(np.ascontiguousarray(a.data[idx]), (a,), bw, "narrow")


def upsample_nearest2(a: Tensor) -> Tensor:
    """Nearest-neighbour ×2 spatial upsampling of an NCHW tensor."""
    out = a.data.repeat(2, axis=2).repeat(2, axis=3)
    b, c, h, w = a.shape

    def bw(g):
        return (g.reshape(b, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return _make(out, (a,), bw, "upsample2")


def downsample_nearest2(a: Tensor) -> Tensor:
    """Keep the top-left pixel of every 2×2 block (NCHW)."""
    shape = a.shape
    if shape[2] % 2 or shape[3] % 2:
        raise ShapeError(f"downsample needs even spatial size, got {shape}")

    def bw(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[:, :, ::2, ::2] = g
        return (full,)

    return _make(np.ascontiguousarray(a.data[:, :, ::2, ::2]), (a,), bw, "downsample2")


# -- convolution kernels ----------------------------------------------------
# Patch matrices are channel-major, (C*k*k, B*OH*OW), so both the matmuls and
# the scatter-add in _col2im stream over contiguous memory.
def _im2col(xp: np.ndarray, k: int, s: int) -> np.ndarray:
    """(B,C,Hp,Wp) -> patches of shape (C*k*k, B*OH*OW)."""
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::s, ::s]
    b, c, oh, ow = win.shape[:4]
    return win.transpose(1, 4, 5, 0, 2, 3).reshape(c * k * k, b * oh * ow)


def _col2im(cols: np.ndarray, shape: tuple, hp: int, wp: int, s: int) -> np.ndarray:
    """Scatter-add patches (C*k*k, B*OH*OW) into a (B,C,hp,wp) canvas."""
    b, c, oh, ow, k = shape
    cols = cols.reshape(c, k, k, b, oh, ow)
    out = np.zeros((c, b, hp, wp), dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            out[:, :, i:i + s * (oh - 1) + 1:s, j:j + s * (ow - 1) + 1:s] += cols[:, i, j]
    return out.transpose(1, 0, 2, 3)


def conv_out_size(n: int, k: int, s: int, p: int) -> int:
    return (n + 2 * p - k) // s + 1


def convT_out_size(n: int, k: int, s: int, p: int) -> int:
    return (n - 1) * s - 2 * p + k


def _pad(a: np.ndarray, p: int) -> np.ndarray:
    return np.pad(a, ((0, 0), (0, 0), (p, p), (p, p))) if p else a


def conv2d(x: Tensor, w: Tensor, b: Tensor | None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of NCHW ``x`` with ``w[out_ch, in_ch, kh, kw]``."""
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1] or w.shape[2] != w.shape[3]:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with weight {w.shape}")
    bsz, c, h, wd = x.shape
    oc, _, k, _ = w.shape
    s, p = stride, padding
    oh, ow = conv_out_size(h, k, s, p), conv_out_size(wd, k, s, p)
    if oh <= 0 or ow <= 0:
        raise ShapeError(f"conv2d: output size {oh}x{ow} not positive for input {x.shape}")
    cols = _im2col(_pad(x.data, p), k, s)
    wm = w.data.reshape(oc, c * k * k)
    out = (wm @ cols).reshape(oc, bsz, oh, ow)
    if b is not None:
        out += b.data.reshape(oc, 1, 1, 1)
    out = np.ascontiguousarray(out.transpose(1, 0, 2, 3))

    def bw(g):
        gm = g.transpose(1, 0, 2, 3).reshape(oc, bsz * oh * ow)
        gx = gw = gb = None
        if x.requires_grad:
            gx = _col2im(wm.T @ gm, (bsz, c, oh, ow, k), h + 2 * p, wd + 2 * p, s)
            gx = np.ascontiguousarray(gx[:, :, p:p + h, p:p + wd])
        if w.requires_grad:
            gw = (gm @ cols.T).reshape(w.shape)
        if b is not None and b.requires_grad:
            gb = gm.sum(axis=1)
        return gx, gw, gb

    parents = (x, w, b) if b is not None else (x, w)
    return _make(out, parents, bw, "conv2d")


def conv_transpose2d(x: Tensor, w: Tensor, b: Tensor | None, stride: int = 1,
                     padding: int = 0) -> Tensor:
    """Transposed convolution with ``w[in_ch, out_ch, kh, kw]``.

    This is the adjoint of :func:`conv2d` with the same weight, stride and
    padding.
    """
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[0] or w.shape[2] != w.shape[3]:
        raise ShapeError(f"conv_transpose2d: input {x.shape} incompatible with weight {w.shape}")
    bsz, ic, h, wd = x.shape
    _, oc, k, _ = w.shape
    s, p = stride, padding
    oh, ow = convT_out_size(h, k, s, p), convT_out_size(wd, k, s, p)
    if oh <= 0 or ow <= 0:
        raise ShapeError(f"conv_transpose2d: output size {oh}x{ow} not positive")
    hp, wp = (h - 1) * s + k, (wd - 1) * s + k
    xm = x.data.transpose(1, 0, 2, 3).reshape(ic, bsz * h * wd)
    wm = w.data.reshape(ic, oc * k * k)
    out = _col2im(wm.T @ xm, (bsz, oc, h, wd, k), hp, wp, s)[:, :, p:p + oh, p:p + ow]
    if b is not None:
        out = out + b.data.reshape(1, oc, 1, 1)
    out = np.ascontiguousarray(out)

    def bw(g):
        gcols = _im2col(_pad(g, p), k, s)
        gx = gw = gb = None
        if x.requires_grad:
            gx = np.ascontiguousarray(
                (wm @ gcols).reshape(ic, bsz, h, wd).transpose(1, 0, 2, 3))
        if w.requires_grad:
            gw = (xm @ gcols.T).reshape(w.shape)
        if b is not None and b.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return gx, gw, gb

    parents = (x, w, b) if b is not None else (x, w)
    return _make(out, parents, bw, "conv_transpose2d")


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, mean: np.ndarray, var: np.ndarray,
               eps: float) -> Tensor:
    """Normalize NCHW ``x`` per channel with fixed (running) statistics."""
    c = x.shape[1]
    shp = (1, c, 1, 1)
    inv = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = (x.data - mean.reshape(shp)) * inv.reshape(shp)
    out = xhat * gamma.data.reshape(shp) + beta.data.reshape(shp)

    def bw(g):
        return (g * (gamma.data * inv).reshape(shp), (g * xhat).sum(axis=(0, 2, 3)),
                g.sum(axis=(0, 2, 3)))

    return _make(out.astype(x.dtype), (x, gamma, beta), bw, "batch_norm_eval")


def batch_norm_train(x: Tensor, gamma: Tensor, beta: Tensor, eps: float):
    """Batch-statistics normalization. Returns (output, batch_mean, batch_var)."""
    c = x.shape[1]
    shp = (1, c, 1, 1)
    n = x.shape[0] * x.shape[2] * x.shape[3]
    xd = x.data
    mu = xd.mean(axis=(0, 2, 3))
    xc = xd - mu.reshape(shp)
    var = (xc * xc).mean(axis=(0, 2, 3))
    inv = (1.0 / np.sqrt(var + eps)).astype(xd.dtype)
    xhat = xc * inv.reshape(shp)
    out = xhat * gamma.data.reshape(shp) + beta.data.reshape(shp)

    def bw(g):
        dgamma = (g * xhat).sum(axis=(0, 2, 3))
        dbeta = g.sum(axis=(0, 2, 3))
        gx = None
        if x.requires_grad:
            dxhat = g * gamma.data.reshape(shp)
            gx = (inv.reshape(shp) / n) * (
                n * dxhat
                - dxhat.sum(axis=(0, 2, 3)).reshape(shp)
                - xhat * (dxhat * xhat).sum(axis=(0, 2, 3)).reshape(shp))
        return gx, dgamma, dbeta

    return _make(out, (x, gamma, beta), bw, "batch_norm"), mu, var


# -- gradient checking --------------------------------------------------------
@dataclass
class GradCheckReport:
    max_rel_err: float
    tolerance: float
    n_checked: int
    worst_index: tuple | None = None

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_err <= self.tolerance)


def rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> np.ndarray:
    """|a - n| / max(|a|, |n|, floor), elementwise."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def grad_check(f, input: Tensor, tolerance: float = 1e-3, h: float = 1e-6,
               indices=None, floor: float = 1e-8) -> GradCheckReport:
    """Compare the backward pass of scalar ``f(input)`` to central differences.

    ``input`` is perturbed in place (and restored). Run in float64 so the
    finite-difference error stays far below the tolerance. ``indices``
    restricts the comparison to a subset of flat positions.
    """
    was = input.requires_grad
    input.requires_grad = True
    input.grad = None
    loss = f(input)
    backward(loss)
    analytic = np.zeros(input.size) if input.grad is None else input.grad.reshape(-1).copy()
    input.requires_grad = was
    input.grad = None

    flat = input.data.reshape(-1)
    idx = np.arange(flat.size) if indices is None else np.asarray(indices)
    numeric = np.empty(len(idx))
    with no_grad():
        for j, i in enumerate(idx):
            orig = flat[i]
            step = h * max(1.0, float(np.abs(orig)))
            flat[i] = orig + step
            fp = float(f(input).data.sum())
            flat[i] = orig - step
            fm = float(f(input).data.sum())
            flat[i] = orig
            numeric[j] = (fp - fm) / (2 * step)
    err = rel_error(analytic[idx], numeric, floor)
    if err.size == 0:
        return GradCheckReport(0.0, tolerance, 0)
    worst = int(np.argmax(err))
    return GradCheckReport(float(err[worst]), tolerance, len(idx),
                           np.unravel_index(int(idx[worst]), input.shape))
