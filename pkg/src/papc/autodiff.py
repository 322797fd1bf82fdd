"""Tape-based reverse-mode automatic differentiation over dense matrices.

Every node holds a float64 array of shape ``(rows, cols)`` or a stack of such
matrices ``(batch, rows, cols)``. The only implicit broadcasts are

* a ``(1, cols)`` row vector over the rows of a matrix, and
* an unbatched operand against a batched one (shared weights).

Everything else must be made explicit with :func:`reshape`, :func:`transpose`
and friends. The tape records nodes in creation order, which is a topological
order, and :meth:`Tape.backward` visits them once in reverse.

Example
-------
>>> tape = Tape()
>>> w = tape.leaf(np.ones((2, 3)))
>>> tape.backward(sum_all(square(w)))
>>> w.grad
array([[2., 2., 2.],
       [2., 2., 2.]])
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    pass


class TapeError(RuntimeError):
    pass


class Node:
    __slots__ = ("value", "grad", "tape", "parents", "backward_fn", "requires_grad", "trainable", "name")

    def __init__(self, tape, value, parents=(), backward_fn=None, requires_grad=False, trainable=False, name=None):
        self.value = value
        self.grad = None
        self.tape = tape
        self.parents = parents
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad
        self.trainable = trainable
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def T(self):
        return transpose(self)

    def __add__(self, other):
        if np.isscalar(other):
            return shift(self, other)
        return add(self, other)

    def __radd__(self, other):
        return self.__add__(other)

    def __sub__(self, other):
        if np.isscalar(other):
            return shift(self, -other)
        return sub(self, other)

    def __rsub__(self, other):
        if np.isscalar(other):
            return shift(neg(self), other)
        return sub(other, self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if np.isscalar(other):
            return scale(self, 1.0 / other)
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __repr__(self):
        tag = self.name or ("param" if self.trainable else "node")
        return f"<Node {tag} shape={self.shape}>"

    def _accumulate(self, g):
        if not self.requires_grad:
            return
        if g.shape != self.value.shape:
            g = _unbroadcast(g, self.value.shape)
        if not g.flags.writeable:
            g = np.array(g)
        self.grad = g if self.grad is None else self.grad + g


class Tape:
    """Ordered record of nodes; single writer."""

    def __init__(self):
        self.nodes: list[Node] = []
        self._spent = False

    def _push(self, node: Node) -> Node:
        if self._spent:
            raise TapeError("tape already differentiated; call zero_grad() before reuse")
        self.nodes.append(node)
        return node

    def constant(self, value, name=None) -> Node:
        return self._push(Node(self, _as_matrix(value), name=name))

    def leaf(self, value, trainable=True, name=None) -> Node:
        return self._push(Node(self, _as_matrix(value).copy(), requires_grad=True, trainable=trainable, name=name))

    def params(self) -> list[Node]:
        return [n for n in self.nodes if n.trainable]

    def record(self, value, parents: Sequence[Node], backward_fn: Callable) -> Node:
        req = any(p.requires_grad for p in parents)
        return self._push(Node(self, value, tuple(parents), backward_fn if req else None, req))

    def backward(self, loss: Node) -> None:
        if loss.tape is not self:
            raise TapeError("loss node belongs to a different tape")
        if loss.value.shape != (1, 1):
            raise TapeError(f"backward needs a 1x1 loss, got shape {loss.value.shape}")
        if self._spent:
            raise TapeError("backward already ran on this tape; call zero_grad() first")
        self._spent = True
        if not loss.requires_grad:
            return
        loss.grad = np.ones((1, 1))
        for node in reversed(self.nodes):
            if node.backward_fn is not None and node.grad is not None:
                node.backward_fn(node.grad)
        for node in self.nodes:
            if node.requires_grad and node.grad is None:
                node.grad = np.zeros_like(node.value)

    def zero_grad(self) -> None:
        for node in self.nodes:
            node.grad = None
        self._spent = False


def _as_matrix(value) -> np.ndarray:
    arr = np.asarray(value, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1)
    if arr.ndim not in (2, 3):
        raise ShapeError(f"nodes hold 2-D matrices or 3-D stacks, got ndim={arr.ndim}")
    return arr


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.ndim == 3 and len(shape) == 2:
        g = g.sum(axis=0)
    elif g.ndim == 3 and shape[0] == 1 and g.shape[0] != 1:
        g = g.sum(axis=0, keepdims=True)
    if g.shape[-2] != shape[-2]:
        g = g.sum(axis=-2, keepdims=True)
    return g


def _tape_of(*items) -> Tape:
    for it in items:
        if isinstance(it, Node):
            return it.tape
    raise TapeError("at least one operand must be a Node")


def _node(x, tape: Tape) -> Node:
    if isinstance(x, Node):
        if x.tape is not tape:
            raise TapeError("operands live on different tapes")
        return x
    return tape.constant(x)


def _check_broadcast(op: str, a: np.ndarray, b: np.ndarray) -> None:
    sa, sb = a.shape, b.shape
    if sa == sb:
        return
    ok_batch = len(sa) == 2 or len(sb) == 2 or sa[0] == sb[0] or sa[0] == 1 or sb[0] == 1
    ra, ca = sa[-2:]
    rb, cb = sb[-2:]
    ok_mat = ca == cb and (ra == rb or ra == 1 or rb == 1)
    if not (ok_batch and ok_mat):
        raise ShapeError(f"{op}: incompatible shapes {sa} and {sb}")


def _binary(op, a, b):
    tape = _tape_of(a, b)
    a, b = _node(a, tape), _node(b, tape)
    _check_broadcast(op, a.value, b.value)
    return tape, a, b


def add(a, b) -> Node:
    tape, a, b = _binary("add", a, b)

    def back(g):
        a._accumulate(g)
        b._accumulate(g)

    return tape.record(a.value + b.value, (a, b), back)


def sub(a, b) -> Node:
    tape, a, b = _binary("sub", a, b)

    def back(g):
        a._accumulate(g)
        b._accumulate(-g)

    return tape.record(a.value - b.value, (a, b), back)


def mul(a, b) -> Node:
    """Hadamard product."""
    tape, a, b = _binary("mul", a, b)
    av, bv = a.value, b.value

    def back(g):
        a._accumulate(g * bv)
        b._accumulate(g * av)

    return tape.record(av * bv, (a, b), back)


def div(a, b) -> Node:
    tape, a, b = _binary("div", a, b)
    av, bv = a.value, b.value
    out = av / bv

    def back(g):
        gb = g / bv
        a._accumulate(gb)
        b._accumulate(-gb * out)

    return tape.record(out, (a, b), back)


def scale(a: Node, c: float) -> Node:
    c = float(c)
    return a.tape.record(a.value * c, (a,), lambda g: a._accumulate(g * c))


def shift(a: Node, c: float) -> Node:
    return a.tape.record(a.value + float(c), (a,), lambda g: a._accumulate(g))


def neg(a: Node) -> Node:
    return a.tape.record(-a.value, (a,), lambda g: a._accumulate(-g))


def matmul(a, b) -> Node:
    tape = _tape_of(a, b)
    a, b = _node(a, tape), _node(b, tape)
    av, bv = a.value, b.value
    if av.shape[-1] != bv.shape[-2] or (av.ndim == bv.ndim == 3 and av.shape[0] != bv.shape[0]):
        raise ShapeError(f"matmul: incompatible shapes {av.shape} and {bv.shape}")

    def back(g):
        if a.requires_grad:
            a._accumulate(g @ np.swapaxes(bv, -1, -2))
        if b.requires_grad:
            b._accumulate(np.swapaxes(av, -1, -2) @ g)

    return tape.record(av @ bv, (a, b), back)


def transpose(a: Node) -> Node:
    return a.tape.record(np.swapaxes(a.value, -1, -2), (a,), lambda g: a._accumulate(np.swapaxes(g, -1, -2)))


def reshape(a: Node, shape) -> Node:
    shape = tuple(shape)
    if len(shape) not in (2, 3) or int(np.prod(shape)) != a.value.size:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}")
    old = a.value.shape
    return a.tape.record(a.value.reshape(shape), (a,), lambda g: a._accumulate(g.reshape(old)))


def exp(a: Node) -> Node:
    out = np.exp(a.value)
    return a.tape.record(out, (a,), lambda g: a._accumulate(g * out))


def log(a: Node) -> Node:
    av = a.value
    if np.any(av <= 0):
        raise FloatingPointError("log: nonpositive input")
    return a.tape.record(np.log(av), (a,), lambda g: a._accumulate(g / av))


def relu(a: Node) -> Node:
    mask = a.value > 0
    return a.tape.record(np.where(mask, a.value, 0.0), (a,), lambda g: a._accumulate(g * mask))


def square(a: Node) -> Node:
    av = a.value
    return a.tape.record(av * av, (a,), lambda g: a._accumulate(2.0 * av * g))


def sqrt(a: Node) -> Node:
    out = np.sqrt(a.value)
    return a.tape.record(out, (a,), lambda g: a._accumulate(g * 0.5 / out))


def softmax_rows(a: Node) -> Node:
    z = a.value - a.value.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        a._accumulate(y * (g - (g * y).sum(axis=-1, keepdims=True)))

    return a.tape.record(y, (a,), back)


def standardize(a: Node, eps: float = 1e-5) -> Node:
    """Subtract the mean and divide by the std of *all* entries of each matrix."""
    av = a.value
    n = av.shape[-1] * av.shape[-2]
    if n < 2:
        raise ShapeError(f"standardize: need at least 2 entries per matrix, got shape {av.shape}")
    mu = av.mean(axis=(-2, -1), keepdims=True)
    xc = av - mu
    var = (xc * xc).mean(axis=(-2, -1), keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xh = xc * inv

    def back(g):
        gm = g.mean(axis=(-2, -1), keepdims=True)
        gxm = (g * xh).mean(axis=(-2, -1), keepdims=True)
        a._accumulate(inv * (g - gm - xh * gxm))

    return a.tape.record(xh, (a,), back)


def _slice(a: Node, start: int, stop: int, axis: int) -> Node:
    av = a.value
    if not (0 <= start < stop <= av.shape[axis]):
        raise ShapeError(f"slice [{start}:{stop}] out of range for axis of length {av.shape[axis]}")
    idx = [slice(None)] * av.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)

    def back(g):
        full = np.zeros_like(av)
        full[idx] = g
        a._accumulate(full)

    return a.tape.record(av[idx], (a,), back)


def slice_cols(a: Node, start: int, stop: int) -> Node:
    return _slice(a, start, stop, -1)


def slice_rows(a: Node, start: int, stop: int) -> Node:
    return _slice(a, start, stop, -2)


def _concat(parts: Sequence[Node], axis: int, op: str) -> Node:
    tape = _tape_of(*parts)
    parts = [_node(p, tape) for p in parts]
    ndims = {p.value.ndim for p in parts}
    other = -1 if axis == -2 else -2
    if len(ndims) != 1 or len({p.value.shape[other] for p in parts}) != 1:
        raise ShapeError(f"{op}: incompatible shapes {[p.shape for p in parts]}")
    sizes = [p.value.shape[axis] for p in parts]
    bounds = np.cumsum([0] + sizes)

    def back(g):
        for p, lo, hi in zip(parts, bounds[:-1], bounds[1:]):
            if p.requires_grad:
                p._accumulate(g[..., lo:hi] if axis == -1 else g[..., lo:hi, :])

    return tape.record(np.concatenate([p.value for p in parts], axis=axis), parts, back)


def concat_cols(parts: Sequence[Node]) -> Node:
    return _concat(parts, -1, "concat_cols")


def concat_rows(parts: Sequence[Node]) -> Node:
    return _concat(parts, -2, "concat_rows")


def row_sums(a: Node) -> Node:
    """``(..., r, c) -> (..., r, 1)``."""
    shape = a.value.shape
    return a.tape.record(a.value.sum(axis=-1, keepdims=True), (a,), lambda g: a._accumulate(np.broadcast_to(g, shape)))


def col_sums(a: Node) -> Node:
    """``(..., r, c) -> (..., 1, c)``."""
    shape = a.value.shape
    return a.tape.record(a.value.sum(axis=-2, keepdims=True), (a,), lambda g: a._accumulate(np.broadcast_to(g, shape)))


def sum_all(a: Node) -> Node:
    """Sum every entry (batch included) into a 1x1 node."""
    shape = a.value.shape
    return a.tape.record(np.array([[a.value.sum()]]), (a,), lambda g: a._accumulate(np.full(shape, g[0, 0])))


def mean_batch(a: Node) -> Node:
    """``(b, r, c) -> (r, c)``; identity on unbatched input."""
    av = a.value
    if av.ndim == 2:
        return a
    b = av.shape[0]
    return a.tape.record(av.mean(axis=0), (a,), lambda g: a._accumulate(np.broadcast_to(g / b, av.shape)))


def ball_scale_rows(a: Node, radius: float, straight_through: bool = False) -> Node:
    """Shrink each row onto the L2 ball of ``radius`` when it lies outside.

    ``straight_through`` passes the gradient unchanged (identity Jacobian).
    """
    av = a.value
    norms = np.sqrt((av * av).sum(axis=-1, keepdims=True))
    over = norms > radius
    factor = np.where(over, radius / np.where(over, norms, 1.0), 1.0)
    out = av * factor

    def back(g):
        if straight_through:
            a._accumulate(g)
            return
        # inside: identity; outside: (r/|x|) (I - x x^T / |x|^2)
        unit = av / np.where(norms > 0, norms, 1.0)
        proj = (g * unit).sum(axis=-1, keepdims=True)
        a._accumulate(np.where(over, factor * (g - unit * proj), g))

    return a.tape.record(out, (a,), back)


__all__ = [
    "Node",
    "ShapeError",
    "Tape",
    "TapeError",
    "add",
    "ball_scale_rows",
    "col_sums",
    "concat_cols",
    "concat_rows",
    "div",
    "exp",
    "log",
    "matmul",
    "mean_batch",
    "mul",
    "neg",
    "relu",
    "reshape",
    "row_sums",
    "scale",
    "shift",
    "slice_cols",
    "slice_rows",
    "softmax_rows",
    "sqrt",
    "square",
    "standardize",
    "sub",
    "sum_all",
    "transpose",
]
