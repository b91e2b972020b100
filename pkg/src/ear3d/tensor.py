"""Dense tensors with tape-style reverse-mode automatic differentiation.

Every op builds its output eagerly with numpy and, when any input requires a
gradient, attaches a :class:`Node` holding the closure that maps the output
gradient to input gradients.  Nodes carry a global sequence number so the
executed-op order is recoverable: :meth:`Graph.from_output` collects the nodes
reachable from a loss and sorts them by that number, and :func:`backward`
replays them in reverse.

Broadcasting is limited to scalar-vs-tensor (a Python number or a 0-d
tensor).  Bias-style broadcasting goes through the explicit :func:`add_bias`.
"""
from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Sequence

import numpy as np
from scipy.special import expit

from .errors import GraphError, NumericError, ShapeError

_FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))
_seq = itertools.count()
_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


class Node:
    __slots__ = ("op", "parents", "backward_fn", "seq", "out_id", "consumed")

    def __init__(self, op: str, parents: tuple, backward_fn: Callable, out_id: int):
        self.op = op
        self.parents = parents
        self.backward_fn = backward_fn
        self.seq = next(_seq)
        self.out_id = out_id
        self.consumed = False

    def __repr__(self):
        return f"Node({self.op}, seq={self.seq})"


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_node", "name", "__weakref__")
    __array_priority__ = 1000

    def __init__(self, data, dtype=None, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data.data if isinstance(data, Tensor) else data)
        if dtype is None:
            dtype = arr.dtype if arr.dtype in _FLOAT_DTYPES else np.float64
        dtype = np.dtype(dtype)
        if dtype not in _FLOAT_DTYPES:
            raise TypeError(f"unsupported dtype {dtype}; use float32 or float64")
        self.data = np.require(arr, dtype=dtype, requirements="C")
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._node = None
        self.name = name

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self):
        return self.shape[0]

    # -- autodiff ------------------------------------------------------
    def backward(self):
        backward(self)

    # -- operators -----------------------------------------------------
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axes=None, keepdims=False):
        return reduce_sum(self, axes, keepdims)

    def mean(self, axes=None, keepdims=False):
        return reduce_mean(self, axes, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def permute(self, *order):
        if len(order) == 1 and isinstance(order[0], (tuple, list)):
            order = tuple(order[0])
        return permute(self, order)

    def relu(self):
        return relu(self)

    def sigmoid(self):
        return sigmoid(self)

    def tanh(self):
        return tanh(self)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def check_finite(data: np.ndarray, op: str):
    if not np.isfinite(data).all():
        raise NumericError(f"{op} produced non-finite values")


def make_result(op: str, data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    """Wrap ``data`` as the output of ``op`` and record the node if needed.

    ``backward_fn(g)`` receives the output gradient (treat it as read-only)
    and returns one gradient array, or None, per parent.
    """
    check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out._node = None
    out.requires_grad = False
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._node = Node(op, tuple(parents), backward_fn, id(out))
    return out


class Graph:
    """Executed ops reachable from one output, in execution order."""

    def __init__(self, nodes: list):
        self.nodes = nodes

    @classmethod
    def from_output(cls, out: Tensor) -> "Graph":
        seen = set()
        nodes = []
        stack = [out._node]
        while stack:
            node = stack.pop()
            if node is None or id(node) in seen:
                continue
            seen.add(id(node))
            nodes.append(node)
            for p in node.parents:
                if p._node is not None:
                    stack.append(p._node)
        nodes.sort(key=lambda n: n.seq)
        return cls(nodes)

    def __len__(self):
        return len(self.nodes)

    def ops(self) -> list:
        return [n.op for n in self.nodes]


def backward(loss: Tensor):
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every requiring leaf.

    The graph is consumed: saved activations are released and a second call
    on the same loss raises :class:`GraphError`.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    node = loss._node
    if node is None:
        raise GraphError("loss is not attached to a recorded graph")
    if node.consumed:
        raise GraphError("graph already consumed by a previous backward(); re-run forward")
    graph = Graph.from_output(loss)
    grads = {id(loss): np.ones(loss.shape, dtype=loss.dtype)}
    for n in reversed(graph.nodes):
        g = grads.pop(n.out_id, None)
        if g is not None:
            pgrads = n.backward_fn(g)
            for p, pg in zip(n.parents, pgrads):
                if pg is None or not p.requires_grad:
                    continue
                if p._node is None:
                    if p.grad is None:
                        p.grad = np.array(pg, dtype=p.dtype, copy=True).reshape(p.shape)
                    else:
                        p.grad += pg
                else:
                    key = id(p)
                    prev = grads.get(key)
                    grads[key] = pg if prev is None else prev + pg
        n.consumed = True
        n.backward_fn = None
        n.parents = ()


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def _pair(a, b):
    if not isinstance(a, Tensor) and not isinstance(b, Tensor):
        raise TypeError("at least one operand must be a Tensor")
    if not isinstance(a, Tensor):
        a = Tensor(np.asarray(a), dtype=b.dtype)
    if not isinstance(b, Tensor):
        b = Tensor(np.asarray(b), dtype=a.dtype)
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise ShapeError(f"shape mismatch {a.shape} vs {b.shape} (only scalar broadcasting)")
    return a, b


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.asarray(g.sum())


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    return make_result("add", a.data + b.data, (a, b),
                       lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    return make_result("sub", a.data - b.data, (a, b),
                       lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    return make_result("mul", ad * bd, (a, b),
                       lambda g: (_unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape)))


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = ad / bd

    def bwd(g):
        ga = g / bd
        return _unbroadcast(ga, a.shape), _unbroadcast(-ga * ad / bd, b.shape)

    return make_result("div", out, (a, b), bwd)


def neg(a: Tensor) -> Tensor:
    return make_result("neg", -a.data, (a,), lambda g: (-g,))


def scale(a: Tensor, factor: float) -> Tensor:
    f = a.dtype.type(factor)
    return make_result("scale", a.data * f, (a,), lambda g: (g * f,))


def relu(a: Tensor) -> Tensor:
    pos = a.data > 0
    return make_result("relu", np.where(pos, a.data, a.dtype.type(0)), (a,), lambda g: (g * pos,))


def sigmoid(a: Tensor) -> Tensor:
    s = expit(a.data)
    return make_result("sigmoid", s, (a,), lambda g: (g * s * (1 - s),))


def tanh(a: Tensor) -> Tensor:
    t = np.tanh(a.data)
    return make_result("tanh", t, (a,), lambda g: (g * (1 - t * t),))


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        e = np.exp(a.data)
    return make_result("exp", e, (a,), lambda g: (g * e,))


def log(a: Tensor) -> Tensor:
    x = a.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(x)
    return make_result("log", out, (a,), lambda g: (g / x,))


def clamp_min(a: Tensor, lo: float) -> Tensor:
    keep = a.data > lo
    out = np.where(keep, a.data, a.dtype.type(lo))
    return make_result("clamp_min", out, (a,), lambda g: (g * keep,))


_UNARY = {"relu": relu, "sigmoid": sigmoid, "tanh": tanh, "exp": exp, "log": log, "neg": neg}
_BINARY = {"add": add, "sub": sub, "mul": mul, "div": div}


def elementwise(op_kind: str, a, b=None) -> Tensor:
    """Dispatch by name; ``scale`` takes its factor as ``b``."""
    if op_kind in _BINARY:
        if b is None:
            raise ShapeError(f"{op_kind} needs two operands")
        return _BINARY[op_kind](a, b)
    if op_kind == "scale":
        return scale(as_tensor(a), float(b))
    if op_kind in _UNARY:
        return _UNARY[op_kind](as_tensor(a))
    raise ValueError(f"unknown elementwise op {op_kind!r}")


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of two rank-2 tensors or two equal-batch rank-3 tensors."""
    if a.ndim != b.ndim or a.ndim not in (2, 3):
        raise ShapeError(f"matmul needs two rank-2 or two rank-3 tensors, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"inner extents differ: {a.shape} @ {b.shape}")
    if a.ndim == 3 and a.shape[0] != b.shape[0]:
        raise ShapeError(f"batch extents differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def bwd(g):
        ga = g @ np.swapaxes(bd, -1, -2) if a.requires_grad else None
        gb = np.swapaxes(ad, -1, -2) @ g if b.requires_grad else None
        return ga, gb

    return make_result("matmul", np.matmul(ad, bd), (a, b), bwd)


def matmul_batched(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 3 or b.ndim != 3:
        raise ShapeError(f"matmul_batched needs [B,M,K] @ [B,K,N], got {a.shape} @ {b.shape}")
    return matmul(a, b)


def add_bias(x: Tensor, bias: Tensor, axis: int = -1) -> Tensor:
    """``x + bias`` with the 1-D ``bias`` laid along ``axis``."""
    axis = axis % x.ndim
    if bias.ndim != 1 or bias.shape[0] != x.shape[axis]:
        raise ShapeError(f"bias of shape {bias.shape} does not fit axis {axis} of {x.shape}")
    view = [1] * x.ndim
    view[axis] = -1
    other = tuple(i for i in range(x.ndim) if i != axis)
    return make_result("add_bias", x.data + bias.data.reshape(view), (x, bias),
                       lambda g: (g, g.sum(axis=other)))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"axis {axis} out of range for shape {x.shape}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return make_result("softmax", s, (x,), bwd)


# ---------------------------------------------------------------------------
# reductions and layout
# ---------------------------------------------------------------------------

def _norm_axes(axes, ndim) -> tuple:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise ShapeError(f"axis {ax} out of range for rank {ndim}")
        out.append(ax % ndim)
    if len(set(out)) != len(out):
        raise ShapeError(f"repeated axes {axes}")
    return tuple(sorted(out))


def reduce_sum(x: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axes, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)
    shape = x.shape

    def bwd(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape),)

    return make_result("sum", np.asarray(out), (x,), bwd)


def reduce_mean(x: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axes, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return scale(reduce_sum(x, axes, keepdims), 1.0 / count)


def reduce(op_kind: str, x: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    if op_kind == "sum":
        return reduce_sum(x, axes, keepdims)
    if op_kind == "mean":
        return reduce_mean(x, axes, keepdims)
    raise ValueError(f"unknown reduction {op_kind!r}")


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if -1 in shape:
        known = int(np.prod([s for s in shape if s != -1]))
        if shape.count(-1) > 1 or known == 0 or x.size % known:
            raise ShapeError(f"cannot reshape {x.shape} to {shape}")
        shape = tuple(x.size // known if s == -1 else s for s in shape)
    if int(np.prod(shape)) != x.size:
        raise ShapeError(f"cannot reshape {x.shape} to {shape}")
    src = x.shape
    return make_result("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(src),))


def permute(x: Tensor, order) -> Tensor:
    order = tuple(int(o) for o in order)
    if sorted(order) != list(range(x.ndim)):
        raise ShapeError(f"{order} is not a permutation of {x.ndim} axes")
    inverse = tuple(np.argsort(order))
    out = np.ascontiguousarray(x.data.transpose(order))
    return make_result("permute", out, (x,), lambda g: (np.ascontiguousarray(g.transpose(inverse)),))


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = list(xs)
    if not xs:
        raise ShapeError("concat of nothing")
    ndim = xs[0].ndim
    axis = axis % ndim
    for t in xs[1:]:
        if t.ndim != ndim or any(t.shape[i] != xs[0].shape[i] for i in range(ndim) if i != axis):
            raise ShapeError(f"concat extents differ: {[t.shape for t in xs]}")
    bounds = np.cumsum([t.shape[axis] for t in xs])[:-1]

    def bwd(g):
        return tuple(np.split(g, bounds, axis=axis))

    return make_result("concat", np.concatenate([t.data for t in xs], axis=axis), xs, bwd)


def slice_(x: Tensor, ranges) -> Tensor:
    """Basic slicing; ``ranges`` holds one ``slice`` or ``(start, stop)`` per leading axis."""
    idx = []
    for ax, r in enumerate(ranges):
        if ax >= x.ndim:
            raise ShapeError(f"too many ranges for shape {x.shape}")
        if not isinstance(r, slice):
            start, stop = r
            if not 0 <= start <= stop <= x.shape[ax]:
                raise ShapeError(f"range {r} outside axis {ax} of extent {x.shape[ax]}")
            r = slice(start, stop)
        idx.append(r)
    idx = tuple(idx)
    shape, dtype = x.shape, x.dtype

    def bwd(g):
        full = np.zeros(shape, dtype=dtype)
        full[idx] = g
        return (full,)

    return make_result("slice", np.ascontiguousarray(x.data[idx]), (x,), bwd)

