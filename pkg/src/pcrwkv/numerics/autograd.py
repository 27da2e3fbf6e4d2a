"""Reverse-mode automatic differentiation over float64 numpy arrays.

A ``Node`` wraps a value array and records how it was produced. Calling
:func:`backward` on a scalar node walks the graph in reverse topological
order and accumulates ``d root / d node`` into every reachable node's
``grad``. Nodes built only from constants carry ``requires_grad=False`` and
are skipped during the backward sweep.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from ..errors import DomainError, InvalidAxis, NonScalarRoot, ShapeMismatch

DTYPE = np.float64

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Node:
    __slots__ = ("value", "_grad", "parents", "_backward", "requires_grad", "name")

    def __init__(
        self,
        value,
        parents: tuple["Node", ...] = (),
        backward_fn: BackwardFn | None = None,
        requires_grad: bool | None = None,
        name: str | None = None,
    ):
        self.value = np.asarray(value, dtype=DTYPE)
        self._grad: np.ndarray | None = None
        self.parents = parents
        self._backward = backward_fn
        if requires_grad is None:
            requires_grad = any(p.requires_grad for p in parents)
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def grad(self) -> np.ndarray:
        if self._grad is None:
            self._grad = np.zeros_like(self.value)
        return self._grad

    @grad.setter
    def grad(self, g) -> None:
        g = np.asarray(g, dtype=DTYPE)
        if g.shape != self.value.shape:
            raise ShapeMismatch(f"grad shape {g.shape} != value shape {self.value.shape}")
        self._grad = g

    def zero_grad(self) -> None:
        self._grad = None

    def __repr__(self) -> str:
        label = f" {self.name}" if self.name else ""
        return f"Node{label}(shape={self.value.shape}, requires_grad={self.requires_grad})"

    # operator sugar
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

    def __getitem__(self, idx):
        return index(self, idx)


def parameter(value, name: str | None = None) -> Node:
    """A leaf that receives gradients."""
    return Node(np.array(value, dtype=DTYPE), requires_grad=True, name=name)


def const(value) -> Node:
    if isinstance(value, Node):
        return value
    return Node(value, requires_grad=False)


def _as_node(x) -> Node:
    return x if isinstance(x, Node) else Node(x, requires_grad=False)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_shape(a: Node, b: Node) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeMismatch(f"cannot broadcast {a.shape} with {b.shape}") from exc


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Node:
    a, b = _as_node(a), _as_node(b)
    _broadcast_shape(a, b)
    sa, sb = a.shape, b.shape
    return Node(a.value + b.value, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Node:
    a, b = _as_node(a), _as_node(b)
    _broadcast_shape(a, b)
    sa, sb = a.shape, b.shape
    return Node(a.value - b.value, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Node:
    a, b = _as_node(a), _as_node(b)
    _broadcast_shape(a, b)
    av, bv = a.value, b.value

    def bw(g):
        return (
            _unbroadcast(g * bv, av.shape) if a.requires_grad else None,
            _unbroadcast(g * av, bv.shape) if b.requires_grad else None,
        )

    return Node(av * bv, (a, b), bw)


def div(a, b) -> Node:
    a, b = _as_node(a), _as_node(b)
    _broadcast_shape(a, b)
    if np.any(b.value == 0):
        raise DomainError("division by zero")
    av, bv = a.value, b.value
    out = av / bv

    def bw(g):
        return (
            _unbroadcast(g / bv, av.shape) if a.requires_grad else None,
            _unbroadcast(-g * out / bv, bv.shape) if b.requires_grad else None,
        )

    return Node(out, (a, b), bw)


def neg(a) -> Node:
    a = _as_node(a)
    return Node(-a.value, (a,), lambda g: (-g,))


def exp(a) -> Node:
    a = _as_node(a)
    out = np.exp(a.value)
    return Node(out, (a,), lambda g: (g * out,))


def log(a) -> Node:
    a = _as_node(a)
    if np.any(a.value <= 0):
        raise DomainError("log of non-positive input")
    av = a.value
    return Node(np.log(av), (a,), lambda g: (g / av,))


def relu(a) -> Node:
    a = _as_node(a)
    mask = a.value > 0
    return Node(np.where(mask, a.value, 0.0), (a,), lambda g: (g * mask,))


def sigmoid(a) -> Node:
    a = _as_node(a)
    x = a.value
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return Node(out, (a,), lambda g: (g * out * (1.0 - out),))


def square(a) -> Node:
    a = _as_node(a)
    av = a.value
    return Node(av * av, (a,), lambda g: (2.0 * g * av,))


def sqrt(a) -> Node:
    a = _as_node(a)
    if np.any(a.value < 0):
        raise DomainError("sqrt of negative input")
    out = np.sqrt(a.value)
    return Node(out, (a,), lambda g: (0.5 * g / out,))


_UNARY = {"exp": exp, "log": log, "relu": relu, "sigmoid": sigmoid, "square": square, "sqrt": sqrt, "neg": neg}
_BINARY = {"add": add, "sub": sub, "mul": mul, "div": div}


def elementwise(op: str, a, b=None) -> Node:
    """Dispatch by name: add, sub, mul, div, exp, log, relu, sigmoid, square (plus sqrt, neg)."""
    if op in _BINARY:
        if b is None:
            raise TypeError(f"{op} needs two operands")
        return _BINARY[op](a, b)
    if op in _UNARY:
        if b is not None:
            raise TypeError(f"{op} takes one operand")
        return _UNARY[op](a)
    raise ValueError(f"unknown elementwise op {op!r}")


# --------------------------------------------------------------- linear algebra


def matmul(a, b) -> Node:
    """Matrix product with numpy batch broadcasting over leading dimensions."""
    a, b = _as_node(a), _as_node(b)
    if a.value.ndim < 2 or b.value.ndim < 2:
        raise ShapeMismatch(f"matmul needs rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch(f"inner dimensions differ: {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError as exc:
        raise ShapeMismatch(f"batch dimensions differ: {a.shape} @ {b.shape}") from exc
    av, bv = a.value, b.value

    def bw(g):
        ga = _unbroadcast(g @ np.swapaxes(bv, -1, -2), av.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(av, -1, -2) @ g, bv.shape) if b.requires_grad else None
        return ga, gb

    return Node(av @ bv, (a, b), bw)


def spmm(matrix, x) -> Node:
    """Product of a constant scipy sparse matrix with a 2-D node."""
    x = _as_node(x)
    if x.value.ndim != 2 or matrix.shape[1] != x.shape[0]:
        raise ShapeMismatch(f"spmm: {matrix.shape} @ {x.shape}")
    mt = matrix.T.tocsr()
    return Node(np.asarray(matrix @ x.value), (x,), lambda g: (np.asarray(mt @ g),))


# -------------------------------------------------------------------- reductions


def _norm_axis(axis, ndim: int):
    if axis is None:
        return None
    axes = (axis,) if isinstance(axis, (int, np.integer)) else tuple(axis)
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise InvalidAxis(f"axis {ax} out of range for rank {ndim}")
        out.append(ax % ndim)
    return tuple(sorted(out))


def _expand_to(g: np.ndarray, shape: tuple[int, ...], axes, keepdims: bool) -> np.ndarray:
    if axes is None:
        return np.broadcast_to(np.reshape(g, (1,) * len(shape)), shape)
    if not keepdims:
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


def sum(a, axis=None, keepdims: bool = False) -> Node:  # noqa: A001
    a = _as_node(a)
    axes = _norm_axis(axis, a.value.ndim)
    shape = a.shape
    out = a.value.sum(axis=axes, keepdims=keepdims)
    return Node(out, (a,), lambda g: (_expand_to(g, shape, axes, keepdims).copy(),))


def mean(a, axis=None, keepdims: bool = False) -> Node:
    a = _as_node(a)
    axes = _norm_axis(axis, a.value.ndim)
    shape = a.shape
    count = a.value.size if axes is None else int(np.prod([shape[i] for i in axes]))
    out = a.value.mean(axis=axes, keepdims=keepdims)
    return Node(out, (a,), lambda g: (_expand_to(g, shape, axes, keepdims) / count,))


def max(a, axis=None, keepdims: bool = False) -> Node:  # noqa: A001
    """Max reduction over a single axis (or all). Gradient goes to the first argmax."""
    a = _as_node(a)
    axes = _norm_axis(axis, a.value.ndim)
    if axes is not None and len(axes) != 1:
        raise InvalidAxis("max reduces over one axis at a time")
    av = a.value
    if axes is None:
        flat = int(np.argmax(av))  # np.argmax returns the first occurrence
        out = av.reshape(-1)[flat]
        if keepdims:
            out = np.reshape(out, (1,) * av.ndim)

        def bw(g):
            grad = np.zeros(av.size)
            grad[flat] = np.sum(g)
            return (grad.reshape(av.shape),)

        return Node(out, (a,), bw)
    ax = axes[0]
    idx = np.expand_dims(np.argmax(av, axis=ax), ax)
    out = np.take_along_axis(av, idx, axis=ax)
    if not keepdims:
        out = np.squeeze(out, axis=ax)

    def bw(g):
        grad = np.zeros_like(av)
        gg = g if keepdims else np.expand_dims(g, ax)
        np.put_along_axis(grad, idx, gg, axis=ax)
        return (grad,)

    return Node(out, (a,), bw)


_REDUCE = {"sum": sum, "mean": mean, "max": max}


def reduce(op: str, a, axis=None, keepdims: bool = False) -> Node:
    if op not in _REDUCE:
        raise ValueError(f"unknown reduction {op!r}")
    return _REDUCE[op](a, axis=axis, keepdims=keepdims)


# ---------------------------------------------------------------- shape plumbing


def reshape(a, shape) -> Node:
    a = _as_node(a)
    old = a.shape
    try:
        out = a.value.reshape(shape)
    except ValueError as exc:
        raise ShapeMismatch(str(exc)) from exc
    return Node(out, (a,), lambda g: (g.reshape(old),))


def swapaxes(a, ax1: int, ax2: int) -> Node:
    a = _as_node(a)
    return Node(np.swapaxes(a.value, ax1, ax2), (a,), lambda g: (np.swapaxes(g, ax1, ax2),))


def index(a, idx) -> Node:
    """Numpy-style indexing; repeated advanced indices scatter-add in backward."""
    a = _as_node(a)
    av = a.value

    def bw(g):
        grad = np.zeros_like(av)
        np.add.at(grad, idx, g)
        return (grad,)

    return Node(av[idx], (a,), bw)


def take(a, indices: np.ndarray, axis: int) -> Node:
    """Gather along ``axis``; ``indices`` may have extra leading batch structure via take_along_axis."""
    a = _as_node(a)
    av = a.value
    indices = np.asarray(indices)
    out = np.take(av, indices, axis=axis)
    ax = axis % av.ndim

    def bw(g):
        grad = np.zeros_like(av)
        gm = np.moveaxis(grad, ax, 0)
        gg = np.moveaxis(g, tuple(range(ax, ax + indices.ndim)), tuple(range(indices.ndim)))
        np.add.at(gm, indices, gg)
        return (grad,)

    return Node(out, (a,), bw)


def gather_rows(a, indices: np.ndarray) -> Node:
    """Per-batch row gather: ``out[b, t] = a[b, indices[b, t]]`` for rank-3 ``a`` of shape (B, T, C)."""
    a = _as_node(a)
    av = a.value
    if av.ndim != 3 or indices.ndim != 2 or indices.shape[0] != av.shape[0]:
        raise ShapeMismatch(f"gather_rows: value {av.shape}, indices {indices.shape}")
    b_idx = np.arange(av.shape[0])[:, None]
    out = av[b_idx, indices]

    def bw(g):
        grad = np.zeros_like(av)
        np.add.at(grad, (b_idx, indices), g)
        return (grad,)

    return Node(out, (a,), bw)


def concat(nodes: Sequence, axis: int = -1) -> Node:
    nodes = [_as_node(n) for n in nodes]
    try:
        out = np.concatenate([n.value for n in nodes], axis=axis)
    except ValueError as exc:
        raise ShapeMismatch(str(exc)) from exc
    ax = axis % out.ndim
    bounds = np.cumsum([0] + [n.shape[ax] for n in nodes])

    def bw(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax) for i in range(len(nodes))
        )

    return Node(out, tuple(nodes), bw)


def segment_max(x, segments: np.ndarray, num_segments: int) -> Node:
    """Row-wise max of a 2-D node within each segment id.

    Every segment in ``range(num_segments)`` must be non-empty. The gradient of
    each output entry flows to the lowest-index row attaining the max.
    """
    x = _as_node(x)
    xv = x.value
    segments = np.asarray(segments)
    if xv.ndim != 2 or segments.shape != (xv.shape[0],):
        raise ShapeMismatch(f"segment_max: value {xv.shape}, segments {segments.shape}")
    order = np.argsort(segments, kind="stable")
    seg_sorted = segments[order]
    starts = np.searchsorted(seg_sorted, np.arange(num_segments))
    if np.any(np.bincount(segments, minlength=num_segments) == 0):
        raise ValueError("segment_max: empty segment")
    xs = xv[order]
    out = np.maximum.reduceat(xs, starts, axis=0)
    n = xs.shape[0]
    hit = xs == out[seg_sorted]
    pos = np.where(hit, np.arange(n)[:, None], n)
    first = np.minimum.reduceat(pos, starts, axis=0)
    src = order[first]  # (num_segments, C) original row feeding each output
    cols = np.arange(xv.shape[1])[None, :]

    def bw(g):
        grad = np.zeros_like(xv)
        np.add.at(grad, (src, np.broadcast_to(cols, src.shape)), g)
        return (grad,)

    return Node(out, (x,), bw)


def detach(a) -> Node:
    return Node(_as_node(a).value.copy(), requires_grad=False)


# ---------------------------------------------------------------------- backward


def _topo_order(root: Node) -> list[Node]:
    order: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Node, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Node) -> None:
    """Accumulate d root / d node into ``grad`` of every reachable node."""
    if root.value.size != 1:
        raise NonScalarRoot(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        return
    pending: dict[int, np.ndarray] = {id(root): np.ones_like(root.value)}
    for node in reversed(_topo_order(root)):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if node._grad is None:
            node._grad = np.array(g, dtype=DTYPE, copy=True)
        else:
            node._grad = node._grad + g
        if node._backward is None:
            continue
        for parent, pg in zip(node.parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in pending:
                pending[key] = pending[key] + pg
            else:
                pending[key] = pg
