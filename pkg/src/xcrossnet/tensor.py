"""Dense reverse-mode autodiff on top of numpy.

Every op takes ``DiffArray`` (or anything ``np.asarray`` accepts) and returns a
new ``DiffArray``. When any input requires a gradient the output records a
closure mapping the output gradient to input gradients; ``backward`` walks the
recorded graph in reverse topological order.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np
from scipy.special import expit

DEFAULT_DTYPE = np.float64

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


class GraphFreedError(RuntimeError):
    pass


class DiffArray:
    __slots__ = ("data", "requires_grad", "grad", "name", "retain", "_parents", "_backward", "_freed", "__weakref__")

    # let numpy defer to our reflected operators
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype or DEFAULT_DTYPE)
        if arr.dtype.kind != "f":
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self.retain = False
        self._parents: tuple = ()
        self._backward: Callable | None = None
        self._freed = False

    # -- basic properties ---------------------------------------------------
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
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            _err("item", "only size-1 arrays convert to a scalar", self.shape)
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "DiffArray":
        return DiffArray(self.data)

    def zero_grad(self):
        self.grad = None

    def retain_grad(self) -> "DiffArray":
        self.retain = True
        return self

    def __repr__(self):
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"DiffArray(shape={self.shape}{rg})"

    def backward(self, retain_graph: bool = False):
        backward(self, retain_graph=retain_graph)

    # -- operators ------------------------------------------------------------
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
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def _err(op: str, msg: str, *shapes):
    shown = " vs ".join(str(tuple(s)) for s in shapes)
    raise ValueError(f"{op}: {msg} (shapes {shown})")


def as_diff(x) -> DiffArray:
    return x if isinstance(x, DiffArray) else DiffArray(x)


def _make(data: np.ndarray, parents: Sequence[DiffArray], backward_fn: Callable) -> DiffArray:
    out = DiffArray(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == tuple(shape):
        return grad
    nlead = grad.ndim - len(shape)
    if nlead > 0:
        grad = grad.sum(axis=tuple(range(nlead)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _norm_axes(axis, ndim) -> tuple:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


# -- backward ----------------------------------------------------------------------


def _toposort(root: DiffArray) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
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


def backward(loss: DiffArray, retain_graph: bool = False):
    """Populate ``.grad`` of every leaf (and retained node) reachable from ``loss``.

    Leaf gradients accumulate into an existing ``.grad``. The graph is freed
    afterwards unless ``retain_graph`` is set.
    """
    if loss.size != 1:
        _err("backward", "loss must be scalar", loss.shape)
    if loss._freed:
        raise GraphFreedError("backward: graph already freed by a previous backward pass; re-run forward or pass retain_graph=True")
    if not loss.requires_grad:
        raise RuntimeError("backward: loss does not require grad")
    order = _toposort(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf or node.retain:
            node.grad = g.copy() if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        pgrads = node._backward(g)
        for p, pg in zip(node._parents, pgrads):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
        if not retain_graph:
            node._parents = ()
            node._backward = None
            node._freed = True


# -- elementwise ---------------------------------------------------------------------


def add(a, b) -> DiffArray:
    a, b = as_diff(a), as_diff(b)
    try:
        data = a.data + b.data
    except ValueError:
        _err("add", "shapes do not broadcast", a.shape, b.shape)
    return _make(data, (a, b), lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape)))


def sub(a, b) -> DiffArray:
    a, b = as_diff(a), as_diff(b)
    try:
        data = a.data - b.data
    except ValueError:
        _err("sub", "shapes do not broadcast", a.shape, b.shape)
    return _make(data, (a, b), lambda g: (unbroadcast(g, a.shape), unbroadcast(-g, b.shape)))


def mul(a, b) -> DiffArray:
    a, b = as_diff(a), as_diff(b)
    try:
        data = a.data * b.data
    except ValueError:
        _err("mul", "shapes do not broadcast", a.shape, b.shape)

    def bw(g):
        ga = unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(data, (a, b), bw)


def div(a, b) -> DiffArray:
    a, b = as_diff(a), as_diff(b)
    try:
        data = a.data / b.data
    except ValueError:
        _err("div", "shapes do not broadcast", a.shape, b.shape)

    def bw(g):
        ga = unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = unbroadcast(-g * data / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(data, (a, b), bw)


def neg(a) -> DiffArray:
    a = as_diff(a)
    return _make(-a.data, (a,), lambda g: (-g,))


def power(a, p: float) -> DiffArray:
    a = as_diff(a)
    data = a.data**p
    return _make(data, (a,), lambda g: (g * p * a.data ** (p - 1),))


def exp(a) -> DiffArray:
    a = as_diff(a)
    data = np.exp(a.data)
    return _make(data, (a,), lambda g: (g * data,))


def log(a) -> DiffArray:
    a = as_diff(a)
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a) -> DiffArray:
    a = as_diff(a)
    data = np.sqrt(a.data)
    return _make(data, (a,), lambda g: (g * 0.5 / data,))


def abs_(a) -> DiffArray:
    a = as_diff(a)
    return _make(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return expit(x)


def sigmoid(a) -> DiffArray:
    a = as_diff(a)
    s = _sigmoid(a.data)
    return _make(s, (a,), lambda g: (g * s * (1.0 - s),))


def relu(a) -> DiffArray:
    a = as_diff(a)
    mask = a.data > 0
    return _make(a.data * mask, (a,), lambda g: (g * mask,))


def silu(a) -> DiffArray:
    a = as_diff(a)
    s = _sigmoid(a.data)
    return _make(a.data * s, (a,), lambda g: (g * (s + a.data * s * (1.0 - s)),))


def _channel_shape(ndim: int, axis: int, n: int) -> tuple:
    shape = [1] * ndim
    shape[axis % ndim] = n
    return tuple(shape)


def prelu(a, slope, axis: int = -1) -> DiffArray:
    """Leaky rectifier with one learnable slope per channel along ``axis``."""
    a, slope = as_diff(a), as_diff(slope)
    if slope.ndim != 1 or slope.shape[0] != a.shape[axis]:
        _err("prelu", f"slope must have length {a.shape[axis]} along axis {axis}", a.shape, slope.shape)
    sl = slope.data.reshape(_channel_shape(a.ndim, axis, slope.shape[0]))
    pos = a.data > 0
    data = np.where(pos, a.data, sl * a.data)

    def bw(g):
        ga = g * np.where(pos, 1.0, sl) if a.requires_grad else None
        gs = None
        if slope.requires_grad:
            gs = unbroadcast(np.where(pos, 0.0, g * a.data), sl.shape).reshape(-1)
        return ga, gs

    return _make(data, (a, slope), bw)


def glu(a, axis: int = -1) -> DiffArray:
    """Split ``a`` in halves along ``axis``; first half is the value, second the gate."""
    a = as_diff(a)
    n = a.shape[axis]
    if n % 2:
        _err("glu", f"axis {axis} extent must be even", a.shape)
    val, gate = np.split(a.data, 2, axis=axis)
    s = _sigmoid(gate)
    data = val * s

    def bw(g):
        return (np.concatenate([g * s, g * val * s * (1.0 - s)], axis=axis),)

    return _make(data, (a,), bw)


# -- reductions -----------------------------------------------------------------------


def sum_(a, axis=None, keepdims: bool = False) -> DiffArray:
    a = as_diff(a)
    axes = _norm_axes(axis, a.ndim)
    data = a.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(data, (a,), bw)


def mean(a, axis=None, keepdims: bool = False) -> DiffArray:
    a = as_diff(a)
    axes = _norm_axes(axis, a.ndim)
    n = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    data = a.data.mean(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / n, a.shape).copy(),)

    return _make(data, (a,), bw)


def softmax(a) -> DiffArray:
    """Softmax over the last axis."""
    a = as_diff(a)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _make(s, (a,), bw)


def log_softmax(a) -> DiffArray:
    """Log-softmax over the last axis."""
    a = as_diff(a)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    data = z - lse
    s = np.exp(data)

    def bw(g):
        return (g - s * g.sum(axis=-1, keepdims=True),)

    return _make(data, (a,), bw)


# -- shape ops ---------------------------------------------------------------------------


def reshape(a, shape) -> DiffArray:
    a = as_diff(a)
    try:
        data = a.data.reshape(shape)
    except ValueError:
        _err("reshape", f"cannot reshape to {tuple(shape)}", a.shape)
    return _make(data, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None) -> DiffArray:
    a = as_diff(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(ax % a.ndim for ax in axes)
    inv = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def moveaxis(a, source, destination) -> DiffArray:
    a = as_diff(a)
    perm = np.moveaxis(np.arange(a.ndim), source, destination)
    return transpose(a, tuple(int(p) for p in perm))


def concat(xs: Sequence, axis: int = 0) -> DiffArray:
    xs = [as_diff(x) for x in xs]
    try:
        data = np.concatenate([x.data for x in xs], axis=axis)
    except ValueError:
        _err("concat", f"extents off the concat axis {axis} differ", *[x.shape for x in xs])
    splits = np.cumsum([x.shape[axis] for x in xs])[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(data, xs, bw)


def stack(xs: Sequence, axis: int = 0) -> DiffArray:
    xs = [as_diff(x) for x in xs]
    nd = xs[0].ndim + 1
    ax = axis % nd
    return concat([reshape(x, x.shape[:ax] + (1,) + x.shape[ax:]) for x in xs], axis=ax)


def getitem(a, idx) -> DiffArray:
    """Basic (slice/int) indexing."""
    a = as_diff(a)
    data = a.data[idx]

    def bw(g):
        out = np.zeros_like(a.data)
        out[idx] = g
        return (out,)

    return _make(np.array(data, copy=True), (a,), bw)


def take(a, indices, axis: int = -1) -> DiffArray:
    """Gather along ``axis`` with an integer index array of any shape."""
    a = as_diff(a)
    idx = np.asarray(indices, dtype=np.intp)
    ax = axis % a.ndim
    if idx.size and (idx.min() < -a.shape[ax] or idx.max() >= a.shape[ax]):
        _err("take", f"index out of range for axis {axis}", a.shape, idx.shape)
    data = np.take(a.data, idx, axis=ax)

    def bw(g):
        out = np.zeros_like(a.data)
        np.add.at(out, (slice(None),) * ax + (idx,), g)
        return (out,)

    return _make(data, (a,), bw)


def index_add(a, indices, size: int, axis: int = -1) -> DiffArray:
    """Scatter-add: ``out[..., indices[j...], ...] += a[..., j..., ...]``; adjoint of ``take``."""
    a = as_diff(a)
    idx = np.asarray(indices, dtype=np.intp)
    ax = axis % a.ndim
    if a.shape[ax : ax + idx.ndim] != idx.shape:
        _err("index_add", "index shape must match the scattered extents", a.shape, idx.shape)
    out_shape = a.shape[:ax] + (size,) + a.shape[ax + idx.ndim :]
    data = np.zeros(out_shape, dtype=a.data.dtype)
    np.add.at(data, (slice(None),) * ax + (idx,), a.data)
    return _make(data, (a,), lambda g: (np.take(g, idx, axis=ax),))


def embedding_add(x, table, positions, channel_axis: int, position_axis: int) -> DiffArray:
    """Add rows ``table[positions]`` of a [P, C] table to ``x``.

    Row ``positions[t]`` lands at index ``t`` of ``position_axis`` and its C
    columns along ``channel_axis``; every other axis is broadcast.
    """
    x, table = as_diff(x), as_diff(table)
    pos = np.asarray(positions, dtype=np.intp)
    cax, pax = channel_axis % x.ndim, position_axis % x.ndim
    if table.ndim != 2 or table.shape[1] != x.shape[cax] or pos.shape != (x.shape[pax],):
        _err("embedding_add", "table must be [P, C] and positions match the position axis", x.shape, table.shape, pos.shape)
    if pos.size and (pos.min() < 0 or pos.max() >= table.shape[0]):
        _err("embedding_add", "position out of table range", table.shape, pos.shape)
    rows = table.data[pos]  # [T, C]
    shape = [1] * x.ndim
    shape[pax], shape[cax] = rows.shape[0], rows.shape[1]
    perm = (0, 1) if pax < cax else (1, 0)
    emb = rows.transpose(perm).reshape(shape)
    data = x.data + emb

    def bw(g):
        gt = None
        if table.requires_grad:
            red = unbroadcast(g, tuple(shape)).reshape(rows.transpose(perm).shape).transpose(perm)
            gt = np.zeros_like(table.data)
            np.add.at(gt, pos, red)
        return g, gt

    return _make(data, (x, table), bw)


# -- linear algebra --------------------------------------------------------------------------


def matmul(a, b) -> DiffArray:
    a, b = as_diff(a), as_diff(b)
    if a.ndim < 2 or b.ndim < 2:
        _err("matmul", "operands must be at least 2-D", a.shape, b.shape)
    try:
        data = np.matmul(a.data, b.data)
    except ValueError:
        _err("matmul", "inner extents or batch dims do not conform", a.shape, b.shape)

    def bw(g):
        ga = unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape) if a.requires_grad else None
        gb = unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape) if b.requires_grad else None
        return ga, gb

    return _make(data, (a, b), bw)


def linear(x, weight, bias=None, axis: int = -1) -> DiffArray:
    """Affine map over one axis: ``weight`` is [in, out], ``bias`` is [out]."""
    x, weight = as_diff(x), as_diff(weight)
    bias = as_diff(bias) if bias is not None else None
    ax = axis % x.ndim
    if weight.ndim != 2 or weight.shape[0] != x.shape[ax]:
        _err("linear", f"weight must be [{x.shape[ax]}, out] for axis {axis}", x.shape, weight.shape)
    if bias is not None and bias.shape != (weight.shape[1],):
        _err("linear", "bias must be [out]", weight.shape, bias.shape)
    xm = np.moveaxis(x.data, ax, -1)
    ym = xm @ weight.data
    if bias is not None:
        ym = ym + bias.data
    data = np.moveaxis(ym, -1, ax)
    n_in, n_out = weight.shape

    def bw(g):
        gm = np.moveaxis(g, ax, -1)
        gx = np.moveaxis(gm @ weight.data.T, -1, ax) if x.requires_grad else None
        g2 = gm.reshape(-1, n_out)
        gw = xm.reshape(-1, n_in).T @ g2 if weight.requires_grad else None
        gb = g2.sum(axis=0) if bias is not None and bias.requires_grad else None
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(data, parents, bw)


def conv1d(x, weight, bias=None, *, axis: int = -1, channel_axis: int = -2, stride: int = 1, padding=0, groups: int = 1) -> DiffArray:
    """Grouped 1-D convolution (cross-correlation) along ``axis``.

    ``weight`` is [C_out, C_in // groups, K]; ``padding`` is an int or a
    (left, right) pair of zeros. All axes other than ``axis`` and
    ``channel_axis`` are batch axes. Computed as im2col + one batched GEMM
    per call.
    """
    x, weight = as_diff(x), as_diff(weight)
    bias = as_diff(bias) if bias is not None else None
    nd = x.ndim
    ax, cax = axis % nd, channel_axis % nd
    if ax == cax:
        raise ValueError("conv1d: axis and channel_axis must differ")
    c_in = x.shape[cax]
    if weight.ndim != 3:
        _err("conv1d", "weight must be [C_out, C_in/groups, K]", x.shape, weight.shape)
    c_out, cig, k = weight.shape
    if groups < 1 or c_in % groups or c_out % groups:
        _err("conv1d", f"groups={groups} must divide C_in={c_in} and C_out={c_out}", x.shape, weight.shape)
    if cig != c_in // groups:
        _err("conv1d", f"weight expects {cig * groups} input channels, input has {c_in}", x.shape, weight.shape)
    if bias is not None and bias.shape != (c_out,):
        _err("conv1d", "bias must be [C_out]", weight.shape, bias.shape)
    if stride < 1:
        raise ValueError("conv1d: stride must be >= 1")
    pl, pr = (padding, padding) if isinstance(padding, int) else padding
    cog = c_out // groups

    xm = np.moveaxis(x.data, (cax, ax), (-2, -1))
    batch = xm.shape[:-2]
    nb = int(np.prod(batch)) if batch else 1
    length = xm.shape[-1]
    lp = length + pl + pr
    l_out = (lp - k) // stride + 1
    if l_out < 1:
        _err("conv1d", f"kernel {k} longer than padded length {lp}", x.shape, weight.shape)
    xp = np.zeros((nb, groups, cig, lp))
    xp[..., pl : pl + length] = xm.reshape(nb, groups, cig, length)
    span = stride * (l_out - 1) + 1
    wg = weight.data.reshape(groups, cog, cig, k)
    # tiny per-group matrices (depthwise etc.) are cheaper as broadcast multiply-adds than as GEMMs
    direct = cig * cog <= 4
    if direct:
        cols = wmat = None
        out = np.einsum("goi,ngil->ngol", wg[..., 0], xp[..., 0:span:stride])
        for j in range(1, k):
            out += np.einsum("goi,ngil->ngol", wg[..., j], xp[..., j : j + span : stride])
        out = out.reshape(batch + (c_out, l_out))
    else:
        # [nb, G, cig, L_out, K] -> [G, nb*L_out, cig*K]
        win = np.lib.stride_tricks.sliding_window_view(xp, k, axis=-1)[..., ::stride, :]
        cols = np.ascontiguousarray(win.transpose(1, 0, 3, 2, 4)).reshape(groups, nb * l_out, cig * k)
        wmat = weight.data.reshape(groups, cog, cig * k)
        out = np.matmul(cols, wmat.transpose(0, 2, 1))  # [G, nb*L_out, cog]
        out = out.reshape(groups, nb, l_out, cog).transpose(1, 0, 3, 2).reshape(batch + (c_out, l_out))
    if bias is not None:
        out = out + bias.data[:, None]
    data = np.moveaxis(out, (-2, -1), (cax, ax))

    def bw(g):
        gm = np.ascontiguousarray(np.moveaxis(g, (cax, ax), (-2, -1))).reshape(nb, groups, cog, l_out)
        gx = gw = gb = None
        if bias is not None and bias.requires_grad:
            gb = gm.sum(axis=(0, 3)).reshape(c_out)
        if direct:
            gxp = np.zeros((nb, groups, cig, lp)) if x.requires_grad else None
            gwg = np.zeros_like(wg)
            for j in range(k):
                if weight.requires_grad:
                    gwg[..., j] = np.einsum("ngil,ngol->goi", xp[..., j : j + span : stride], gm)
                if gxp is not None:
                    gxp[..., j : j + span : stride] += np.einsum("goi,ngol->ngil", wg[..., j], gm)
            if weight.requires_grad:
                gw = gwg.reshape(weight.shape)
        else:
            g2 = np.ascontiguousarray(gm.transpose(1, 0, 3, 2)).reshape(groups, nb * l_out, cog)
            if weight.requires_grad:
                gw = np.matmul(g2.transpose(0, 2, 1), cols).reshape(weight.shape)
            gxp = None
            if x.requires_grad:
                gcols = np.matmul(g2, wmat).reshape(groups, nb, l_out, cig, k)
                gcols = np.ascontiguousarray(gcols.transpose(4, 1, 0, 3, 2))  # [K, nb, G, cig, L_out]
                gxp = np.zeros((nb, groups, cig, lp))
                for j in range(k):
                    gxp[..., j : j + span : stride] += gcols[j]
        if gxp is not None:
            gxm = gxp[..., pl : pl + length].reshape(batch + (c_in, length))
            gx = np.moveaxis(gxm, (-2, -1), (cax, ax))
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(data, parents, bw)


def layer_norm(x, weight=None, bias=None, axes=(-1,), eps: float = 1e-5) -> DiffArray:
    """Normalize over ``axes`` then apply a broadcastable affine."""
    x = as_diff(x)
    weight = as_diff(weight) if weight is not None else None
    bias = as_diff(bias) if bias is not None else None
    axs = _norm_axes(axes, x.ndim)
    mu = x.data.mean(axis=axs, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=axs, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    data = xhat
    if weight is not None:
        try:
            data = data * weight.data
        except ValueError:
            _err("layer_norm", "affine weight does not broadcast", x.shape, weight.shape)
    if bias is not None:
        data = data + bias.data

    def bw(g):
        gw = unbroadcast(g * xhat, weight.shape) if weight is not None and weight.requires_grad else None
        gb = unbroadcast(g, bias.shape) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gh = g * weight.data if weight is not None else g
            gx = inv * (gh - gh.mean(axis=axs, keepdims=True) - xhat * (gh * xhat).mean(axis=axs, keepdims=True))
        return gx, gw, gb

    parents = [x]
    if weight is not None:
        parents.append(weight)
    if bias is not None:
        parents.append(bias)

    def bw_sel(g):
        gx, gw, gb = bw(g)
        res = [gx]
        if weight is not None:
            res.append(gw)
        if bias is not None:
            res.append(gb)
        return tuple(res)

    return _make(data, parents, bw_sel)


PRIMITIVES: dict[str, Callable] = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "neg": neg,
    "power": power,
    "exp": exp,
    "log": log,
    "sqrt": sqrt,
    "abs": abs_,
    "matmul": matmul,
    "linear": linear,
    "conv1d_grouped": conv1d,
    "layer_norm": layer_norm,
    "softmax_lastdim": softmax,
    "log_softmax_lastdim": log_softmax,
    "silu": silu,
    "prelu": prelu,
    "glu": glu,
    "sigmoid": sigmoid,
    "relu": relu,
    "sum": sum_,
    "mean": mean,
    "reshape": reshape,
    "transpose": transpose,
    "concat": concat,
    "slice": getitem,
    "take": take,
    "index_add": index_add,
    "embedding_add": embedding_add,
}


def primitive_op(kind: str, *inputs, **kwargs) -> DiffArray:
    """Dispatch a primitive by name."""
    try:
        fn = PRIMITIVES[kind]
    except KeyError:
        raise ValueError(f"unknown primitive {kind!r}; known: {sorted(PRIMITIVES)}") from None
    return fn(*inputs, **kwargs)
