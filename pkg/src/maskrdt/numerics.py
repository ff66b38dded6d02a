"""Dense f64/f32 tensors with a minimal reverse-mode differentiation tape.

Forward values live in numpy arrays. When any operand is attached to a
Graph, the op appends one node to the tape; backward() replays the tape in
reverse insertion order exactly once. Tensors built without a graph are
constants and forward passes over them allocate no tape nodes.

Broadcasting is deliberately restricted to python-scalar-vs-tensor and
identical shapes (matmul additionally broadcasts leading batch axes), which
keeps every backward rule short enough to audit by hand.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf

ACT_CLAMP = 40.0  # sigmoid/gelu inputs clamped to [-40, 40] against overflow
_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested op."""


class NonFiniteError(ArithmeticError):
    """A forward op produced NaN or Inf (surfaced, never propagated)."""


def _as_array(data, dtype=None):
    arr = np.asarray(data)
    if dtype is not None:
        return arr.astype(dtype, copy=False)
    if arr.dtype == np.float32:
        return arr
    return arr.astype(np.float64, copy=False)


class Node:
    __slots__ = ("kind", "inputs", "shape", "bwd")

    def __init__(self, kind, inputs, shape, bwd):
        self.kind = kind
        self.inputs = inputs  # node ids, None for constant operands
        self.shape = shape
        self.bwd = bwd  # grad -> tuple of contributions aligned with inputs


class Graph:
    """Append-only tape; insertion order is the topological order."""

    def __init__(self):
        self.nodes = []

    def __len__(self):
        return len(self.nodes)

    def _add(self, kind, inputs, shape, bwd):
        self.nodes.append(Node(kind, inputs, shape, bwd))
        return len(self.nodes) - 1

    def leaf(self, data, dtype=None):
        """Register a parameter; its gradient accumulates at the returned node."""
        arr = _as_array(data, dtype)
        nid = self._add("leaf", (), arr.shape, None)
        return Tensor(arr, graph=self, node_id=nid)

    def backward(self, loss):
        """Gradient of a scalar loss w.r.t. every node on the tape.

        Returns {node_id: Tensor}; nodes unreachable from the loss get zeros.
        """
        if loss.graph is not self:
            raise ValueError("loss tensor is not attached to this graph")
        if loss.data.size != 1:
            raise ShapeError(f"backward requires a scalar loss, got shape {loss.data.shape}")
        grads = {loss.node_id: np.ones_like(loss.data)}
        for nid in range(len(self.nodes) - 1, -1, -1):
            node = self.nodes[nid]
            g = grads.get(nid)
            if g is None or node.bwd is None:
                continue
            for iid, contrib in zip(node.inputs, node.bwd(g)):
                if iid is None:
                    continue
                if iid in grads:
                    grads[iid] = grads[iid] + contrib
                else:
                    grads[iid] = contrib
        dtype = loss.data.dtype
        out = {}
        for nid, node in enumerate(self.nodes):
            g = grads.get(nid)
            if g is None:
                g = np.zeros(node.shape, dtype=dtype)
            out[nid] = Tensor(g)
        return out


class Tensor:
    """Immutable-by-convention dense array, optionally attached to a Graph."""

    __slots__ = ("data", "graph", "node_id")

    def __init__(self, data, dtype=None, graph=None, node_id=None):
        self.data = _as_array(data, dtype)
        self.graph = graph
        self.node_id = node_id

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data.reshape(()))

    def __repr__(self):
        tag = "" if self.graph is None else f", node={self.node_id}"
        return f"Tensor(shape={self.data.shape}{tag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)


def _merged_graph(tensors):
    g = None
    for t in tensors:
        if t.graph is None:
            continue
        if g is None:
            g = t.graph
        elif g is not t.graph:
            raise ValueError("operands live on different graphs")
    return g


def _result(kind, data, inputs, bwd):
    if not np.isfinite(data).all():
        raise NonFiniteError(f"op '{kind}' produced a non-finite value")
    g = _merged_graph(inputs)
    if g is None:
        return Tensor(data)
    ids = tuple(t.node_id if t.graph is not None else None for t in inputs)
    nid = g._add(kind, ids, data.shape, bwd)
    return Tensor(data, graph=g, node_id=nid)


def _unbroadcast(g, shape):
    # collapse gradient over axes np.matmul broadcast in the forward pass
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_same_shape(kind, a, b):
    if a.data.shape != b.data.shape:
        raise ShapeError(f"{kind}: shapes {a.data.shape} and {b.data.shape} differ "
                         "(only scalar or identical-shape operands are supported)")


# ---------------------------------------------------------------------------
# matmul


def matmul(a, b):
    """Matrix product over the last two axes; leading axes broadcast."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs ndim >= 2, got {a.data.shape} and {b.data.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"matmul: inner dims differ, {a.data.shape} x {b.data.shape}")
    try:
        data = np.matmul(a.data, b.data)
    except ValueError as e:
        raise ShapeError(f"matmul: {a.data.shape} x {b.data.shape}: {e}") from None
    ad, bd = a.data, b.data

    def bwd(g):
        ga = _unbroadcast(np.matmul(g, bd.swapaxes(-1, -2)), ad.shape)
        gb = _unbroadcast(np.matmul(ad.swapaxes(-1, -2), g), bd.shape)
        return ga, gb

    return _result("matmul", data, (a, b), bwd)


# ---------------------------------------------------------------------------
# elementwise ops: add, sub, mul, scale, sigmoid, gelu, exp, log, pow


def add(a, b):
    if not isinstance(b, Tensor):
        c = float(b)
        return _result("add", a.data + c, (a,), lambda g: (g,))
    if not isinstance(a, Tensor):
        return add(b, a)
    _check_same_shape("add", a, b)
    return _result("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b):
    if not isinstance(b, Tensor):
        return add(a, -float(b))
    if not isinstance(a, Tensor):
        return add(scale(b, -1.0), float(a))
    _check_same_shape("sub", a, b)
    return _result("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b):
    if not isinstance(b, Tensor):
        return scale(a, b)
    if not isinstance(a, Tensor):
        return scale(b, a)
    _check_same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _result("mul", ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(t, c):
    c = float(c)
    return _result("scale", t.data * c, (t,), lambda g: (g * c,))


def sigmoid(t):
    x = np.clip(t.data, -ACT_CLAMP, ACT_CLAMP)
    s = 1.0 / (1.0 + np.exp(-x))
    return _result("sigmoid", s, (t,), lambda g: (g * s * (1.0 - s),))


def gelu(t):
    """Exact (erf) GELU: x * Phi(x)."""
    x = np.clip(t.data, -ACT_CLAMP, ACT_CLAMP)
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    out = x * cdf
    pdf = np.exp(-0.5 * x * x) * _INV_SQRT_2PI

    def bwd(g):
        return (g * (cdf + x * pdf),)

    return _result("gelu", out, (t,), bwd)


def exp(t):
    out = np.exp(t.data)
    return _result("exp", out, (t,), lambda g: (g * out,))


def log(t):
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(t.data)
    xd = t.data
    return _result("log", out, (t,), lambda g: (g / xd,))


def power(t, p):
    p = float(p)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = t.data ** p
    xd = t.data

    def bwd(g):
        return (g * p * xd ** (p - 1.0),)

    return _result("pow", out, (t,), bwd)


# ---------------------------------------------------------------------------
# reductions


def _check_axis(t, axis):
    if axis is not None and not -t.ndim <= axis < t.ndim:
        raise ShapeError(f"axis {axis} out of range for shape {t.data.shape}")


def reduce_sum(t, axis=None, keepdims=False):
    _check_axis(t, axis)
    data = t.data.sum(axis=axis, keepdims=keepdims)
    shape, dtype = t.data.shape, t.data.dtype

    def bwd(g):
        if axis is None:
            return (np.full(shape, float(g), dtype=dtype),)
        ge = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(ge, shape).copy(),)

    return _result("sum", data, (t,), bwd)


def reduce_mean(t, axis=None, keepdims=False):
    _check_axis(t, axis)
    data = t.data.mean(axis=axis, keepdims=keepdims)
    shape, dtype = t.data.shape, t.data.dtype
    n = t.data.size if axis is None else t.data.shape[axis]

    def bwd(g):
        if axis is None:
            return (np.full(shape, float(g) / n, dtype=dtype),)
        ge = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(ge, shape).copy() / n,)

    return _result("mean", data, (t,), bwd)


# ---------------------------------------------------------------------------
# structural ops


def transpose(t):
    """Swap the last two axes."""
    if t.ndim < 2:
        raise ShapeError(f"transpose needs ndim >= 2, got {t.data.shape}")
    return _result("transpose", t.data.swapaxes(-1, -2), (t,),
                   lambda g: (g.swapaxes(-1, -2),))


def reshape(t, shape):
    shape = tuple(shape)
    old = t.data.shape
    return _result("reshape", t.data.reshape(shape), (t,),
                   lambda g: (g.reshape(old),))


def concat(tensors, axis=-1):
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat of zero tensors")
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=axis))

    return _result("concat", data, tuple(tensors), bwd)


def slice_rows(t, start, stop):
    """Contiguous row slice along axis -2 (rows of each batch element)."""
    if t.ndim < 2:
        raise ShapeError(f"slice_rows needs ndim >= 2, got {t.data.shape}")
    n = t.data.shape[-2]
    if not (0 <= start <= stop <= n):
        raise ShapeError(f"slice_rows [{start}:{stop}] out of range for {t.data.shape}")
    data = t.data[..., start:stop, :]
    shape, dtype = t.data.shape, t.data.dtype

    def bwd(g):
        full = np.zeros(shape, dtype=dtype)
        full[..., start:stop, :] = g
        return (full,)

    return _result("slice_rows", data, (t,), bwd)


def rotate_half(t):
    """Pairwise (even, odd) channel rotation helper: (x0,x1) -> (-x1,x0)."""
    if t.data.shape[-1] % 2 != 0:
        raise ShapeError(f"rotate_half needs an even last dim, got {t.data.shape}")
    x = t.data
    out = np.empty_like(x)
    out[..., 0::2] = -x[..., 1::2]
    out[..., 1::2] = x[..., 0::2]

    def bwd(g):
        gx = np.empty_like(g)
        gx[..., 1::2] = -g[..., 0::2]
        gx[..., 0::2] = g[..., 1::2]
        return (gx,)

    return _result("rotate_half", out, (t,), bwd)


def backward(loss):
    """Module-level alias: gradients of a scalar loss over its graph."""
    if loss.graph is None:
        raise ValueError("loss tensor is not attached to a graph")
    return loss.graph.backward(loss)
