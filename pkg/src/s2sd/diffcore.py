"""Minimal reverse-mode differentiation over dense float64 arrays.

Values are numpy arrays; every primitive returns a :class:`Node` holding the
forward value and a list of ``(parent, vjp)`` pairs used by the backward pass.
Only the primitives needed by the metric-learning objectives are provided.
"""
from __future__ import annotations

import builtins
import itertools
from typing import Callable, Sequence

import numpy as np

NORM_EPS = 1e-12


class ShapeError(ValueError):
    """Raised when a primitive receives incompatible operand shapes."""

    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = shapes
        super().__init__(f"{op}: incompatible shapes {', '.join(map(str, shapes))}")


class NonFiniteError(FloatingPointError):
    """Raised when a primitive produces NaN or inf."""

    def __init__(self, op: str, shape):
        self.op = op
        super().__init__(f"non-finite value produced by {op} (shape {shape})")


class Node:
    __slots__ = ("value", "grad", "parents", "stop", "op")

    def __init__(self, value, parents=(), op: str = "leaf", stop: bool = False):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.parents: tuple = tuple(parents)
        self.stop = stop
        self.op = op

    @property
    def shape(self) -> tuple:
        return self.value.shape

    def __repr__(self) -> str:
        return f"Node(op={self.op}, shape={self.shape})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(other))

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __truediv__(self, other):
        if isinstance(other, Node):
            return mul(self, reciprocal(other))
        return mul(self, 1.0 / other)

    def __getitem__(self, index):
        return take(self, index)

    @property
    def T(self):
        return transpose(self)


def as_node(x) -> Node:
    return x if isinstance(x, Node) else Node(x, op="const")


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    # reverse of the scalar / row-vector broadcasts allowed by add and mul
    if grad.shape == shape:
        return grad
    if len(shape) == 0:
        return np.asarray(grad.sum())
    return grad.sum(axis=tuple(range(grad.ndim - len(shape)))).reshape(shape)


def _check_broadcast(op: str, a: Node, b: Node) -> None:
    sa, sb = a.shape, b.shape
    if sa == sb or len(sa) == 0 or len(sb) == 0:
        return
    # row-vector broadcast over leading axes only
    if len(sb) < len(sa) and sa[-len(sb):] == sb:
        return
    if len(sa) < len(sb) and sb[-len(sa):] == sa:
        return
    raise ShapeError(op, sa, sb)


def add(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    _check_broadcast("add", a, b)
    return Node(a.value + b.value,
                [(a, lambda g: _unbroadcast(g, a.shape)),
                 (b, lambda g: _unbroadcast(g, b.shape))], "add")


def neg(a) -> Node:
    a = as_node(a)
    return Node(-a.value, [(a, lambda g: -g)], "neg")


def mul(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    _check_broadcast("mul", a, b)
    av, bv = a.value, b.value
    return Node(av * bv,
                [(a, lambda g: _unbroadcast(g * bv, a.shape)),
                 (b, lambda g: _unbroadcast(g * av, b.shape))], "mul")


def reciprocal(a) -> Node:
    a = as_node(a)
    out = 1.0 / a.value
    return Node(out, [(a, lambda g: -g * out * out)], "reciprocal")


def matmul(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    av, bv = a.value, b.value
    return Node(av @ bv,
                [(a, lambda g: g @ bv.T), (b, lambda g: av.T @ g)], "matmul")


def linear(x, w, b=None) -> Node:
    """``x @ w.T + b`` for row-major batches; ``w`` has shape (out, in)."""
    x, w = as_node(x), as_node(w)
    if x.value.ndim != 2 or w.value.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ShapeError("linear", x.shape, w.shape)
    xv, wv = x.value, w.value
    out = xv @ wv.T
    parents = [(x, lambda g: g @ wv), (w, lambda g: g.T @ xv)]
    if b is not None:
        b = as_node(b)
        if b.shape != (w.shape[0],):
            raise ShapeError("linear", w.shape, b.shape)
        out = out + b.value
        parents.append((b, lambda g: g.sum(axis=0)))
    return Node(out, parents, "linear")


def block_linear(x, weights: Sequence, b=None) -> Node:
    """Block-diagonal ``linear``: column block k of ``x`` maps through ``weights[k]``.

    Equivalent to ``linear`` with the block-diagonal matrix assembled from
    ``weights`` (each of shape (out_k, in_k)), without materializing the zeros.
    """
    x = as_node(x)
    ws = [as_node(w) for w in weights]
    if x.value.ndim != 2 or not ws or any(w.value.ndim != 2 for w in ws):
        raise ShapeError("block_linear", x.shape, *(w.shape for w in ws))
    in_b = list(itertools.accumulate([0] + [w.shape[1] for w in ws]))
    out_b = list(itertools.accumulate([0] + [w.shape[0] for w in ws]))
    if in_b[-1] != x.shape[1]:
        raise ShapeError("block_linear", x.shape, *(w.shape for w in ws))
    xv = x.value
    out = np.empty((xv.shape[0], out_b[-1]))
    for k, w in enumerate(ws):
        out[:, out_b[k]:out_b[k + 1]] = xv[:, in_b[k]:in_b[k + 1]] @ w.value.T

    def x_vjp(g):
        gx = np.empty_like(xv)
        for k, w in enumerate(ws):
            gx[:, in_b[k]:in_b[k + 1]] = g[:, out_b[k]:out_b[k + 1]] @ w.value
        return gx

    def w_vjp(k):
        return lambda g: g[:, out_b[k]:out_b[k + 1]].T @ xv[:, in_b[k]:in_b[k + 1]]

    parents = [(x, x_vjp)] + [(w, w_vjp(k)) for k, w in enumerate(ws)]
    if b is not None:
        b = as_node(b)
        if b.shape != (out_b[-1],):
            raise ShapeError("block_linear", out.shape, b.shape)
        out += b.value
        parents.append((b, lambda g: g.sum(axis=0)))
    return Node(out, parents, "block_linear")


def affine(a, scale, shift=0.0) -> Node:
    """``scale * a + shift`` with constant scale/shift (scalars or arrays of a's shape)."""
    a = as_node(a)
    scale = np.asarray(scale, dtype=np.float64)
    if scale.ndim and scale.shape != a.shape:
        raise ShapeError("affine", a.shape, scale.shape)
    return Node(scale * a.value + shift, [(a, lambda g: scale * g)], "affine")


def transpose(a) -> Node:
    a = as_node(a)
    if a.value.ndim != 2:
        raise ShapeError("transpose", a.shape)
    return Node(a.value.T, [(a, lambda g: g.T)], "transpose")


def relu(a) -> Node:
    a = as_node(a)
    mask = a.value > 0
    return Node(np.where(mask, a.value, 0.0), [(a, lambda g: g * mask)], "relu")


def exp(a) -> Node:
    a = as_node(a)
    out = np.exp(a.value)
    return Node(out, [(a, lambda g: g * out)], "exp")


def log(a) -> Node:
    a = as_node(a)
    av = a.value
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(av)
    return Node(out, [(a, lambda g: g / av)], "log")


def sqrt(a) -> Node:
    a = as_node(a)
    with np.errstate(invalid="ignore"):
        out = np.sqrt(a.value)
    return Node(out, [(a, lambda g: g * 0.5 / out)], "sqrt")


def sum(a, axis: int | None = None) -> Node:  # noqa: A001
    a = as_node(a)
    shape = a.shape

    def vjp(g):
        if axis is None:
            return np.broadcast_to(g, shape).copy()
        return np.broadcast_to(np.expand_dims(g, axis), shape).copy()

    return Node(a.value.sum(axis=axis), [(a, vjp)], "sum")


def mean(a, axis: int | None = None) -> Node:
    a = as_node(a)
    n = a.value.size if axis is None else a.shape[axis]
    return mul(sum(a, axis), 1.0 / n)


def max(a, axis: int | None = None) -> Node:  # noqa: A001
    """Maximum; ties split the gradient evenly among arg-maxima."""
    a = as_node(a)
    out = a.value.max(axis=axis)
    expanded = out if axis is None else np.expand_dims(out, axis)
    hit = (a.value == expanded).astype(np.float64)
    hit /= hit.sum(axis=axis, keepdims=axis is not None)

    def vjp(g):
        g = g if axis is None else np.expand_dims(g, axis)
        return hit * g

    return Node(out, [(a, vjp)], "max")


def softmax_rows(a, temperature: float = 1.0) -> Node:
    """Row-wise softmax of ``a / temperature`` with max subtraction."""
    a = as_node(a)
    if a.value.ndim != 2:
        raise ShapeError("softmax_rows", a.shape)
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    z = a.value / temperature
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)

    def vjp(g):
        return p * (g - (g * p).sum(axis=1, keepdims=True)) / temperature

    return Node(p, [(a, vjp)], "softmax_rows")


def log_softmax_rows(a, temperature: float = 1.0) -> Node:
    a = as_node(a)
    if a.value.ndim != 2:
        raise ShapeError("log_softmax_rows", a.shape)
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    z = a.value / temperature
    z = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def vjp(g):
        return (g - p * g.sum(axis=1, keepdims=True)) / temperature

    return Node(out, [(a, vjp)], "log_softmax_rows")


def l2_normalize(a, eps: float = NORM_EPS) -> Node:
    """Row-wise L2 normalization; ``eps`` floors the squared norm."""
    a = as_node(a)
    if a.value.ndim != 2:
        raise ShapeError("l2_normalize", a.shape)
    x = a.value
    norm = np.sqrt((x * x).sum(axis=1, keepdims=True) + eps)
    y = x / norm

    def vjp(g):
        return (g - y * (g * y).sum(axis=1, keepdims=True)) / norm

    return Node(y, [(a, vjp)], "l2_normalize")


def block_cosine(a, sizes: Sequence[int], eps: float = NORM_EPS) -> Node:
    """Cosine matrices of consecutive column blocks of ``a``, stacked row-wise.

    For ``a`` of shape (B, sum(sizes)) the result is (K*B, B); rows
    ``k*B:(k+1)*B`` hold the cosines of the rows of column block k after
    :func:`l2_normalize`.
    """
    a = as_node(a)
    x = a.value
    sizes = [int(s) for s in sizes]
    if x.ndim != 2 or builtins.sum(sizes) != x.shape[1] or min(sizes, default=0) < 1:
        raise ShapeError("block_cosine", a.shape, tuple(sizes))
    b, k = x.shape[0], len(sizes)
    starts = list(itertools.accumulate([0] + sizes[:-1]))
    cols = [slice(st, st + sz) for st, sz in zip(starts, sizes)]
    rows = [slice(i * b, (i + 1) * b) for i in range(k)]
    norm = np.sqrt(np.add.reduceat(x * x, starts, axis=1) + eps)   # (B, K)
    rnorm = np.repeat(norm, sizes, axis=1)
    y = x / rnorm
    out = np.empty((k * b, b))
    for r, c in zip(rows, cols):
        np.matmul(y[:, c], y[:, c].T, out=out[r])

    def vjp(g):
        gy = np.empty_like(y)
        for r, c in zip(rows, cols):
            gk = g[r]
            # each block is y_k y_k^T, so its input gradient is (G + G^T) y_k
            np.matmul(gk + gk.T, y[:, c], out=gy[:, c])
        inner = np.add.reduceat(gy * y, starts, axis=1)
        gy -= y * np.repeat(inner, sizes, axis=1)
        gy /= rnorm
        return gy

    return Node(out, [(a, vjp)], "block_cosine")


def cross_kl_rows(a, log_q, weight: float = 1.0, temperature: float = 1.0) -> Node:
    """``sum(p * (weight * log p - log_q))`` with ``p = softmax(a / temperature)`` per row.

    ``log_q`` is a constant. With ``log_q = sum_k w_k log q_k`` and
    ``weight = sum_k w_k`` this is the weighted sum of row-wise KL(p || q_k).
    """
    a = as_node(a)
    log_q = np.asarray(log_q, dtype=np.float64)
    if a.value.ndim != 2 or log_q.shape != a.shape:
        raise ShapeError("cross_kl_rows", a.shape, log_q.shape)
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    z = a.value / temperature
    z = z - z.max(axis=1, keepdims=True)
    log_p = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    p = np.exp(log_p)
    c = weight * log_p - log_q
    pc = p * c

    def vjp(g):
        return g * (pc - p * pc.sum(axis=1, keepdims=True)) / temperature

    return Node(pc.sum(), [(a, vjp)], "cross_kl_rows")


def concatenate(nodes: Sequence, axis: int = -1) -> Node:
    nodes = [as_node(n) for n in nodes]
    try:
        out = np.concatenate([n.value for n in nodes], axis=axis)
    except ValueError:
        raise ShapeError("concatenate", *(n.shape for n in nodes)) from None
    bounds = np.cumsum([n.shape[axis] for n in nodes])[:-1]

    def make_vjp(i):
        return lambda g: np.split(g, bounds, axis=axis)[i]

    return Node(out, [(n, make_vjp(i)) for i, n in enumerate(nodes)], "concatenate")


def take(a, index) -> Node:
    """Numpy-style indexing; repeated indices accumulate gradient."""
    a = as_node(a)
    shape = a.shape
    try:
        out = a.value[index]
    except IndexError:
        raise ShapeError("take", shape, index) from None
    basic = isinstance(index, (slice, int)) or (
        isinstance(index, tuple) and all(isinstance(i, (slice, int)) for i in index))

    def vjp(g):
        full = np.zeros(shape)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return full

    return Node(out, [(a, vjp)], "take")


def reshape(a, shape) -> Node:
    a = as_node(a)
    old = a.shape
    try:
        out = a.value.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", old, shape) from None
    return Node(out, [(a, lambda g: g.reshape(old))], "reshape")


# When set, stop_gradient records (list) or replays (iterator) its forward values,
# letting finite differences hold detached quantities fixed.
_STOP_TAPE = None


def stop_gradient(a) -> Node:
    """Identity in the forward pass, gradient barrier in the backward pass."""
    a = as_node(a)
    value = a.value
    if isinstance(_STOP_TAPE, list):
        _STOP_TAPE.append(value.copy())
    elif _STOP_TAPE is not None:
        value = next(_STOP_TAPE)
    return Node(value, [(a, lambda g: np.zeros_like(g))], "stop_gradient", stop=True)


def _topological(root: Node, through_stops: bool = False) -> list[Node]:
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
        if through_stops or not node.stop:
            for parent, _ in node.parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
    return order


def first_nonfinite(root: Node) -> Node | None:
    """Earliest node in evaluation order whose value contains NaN or inf."""
    for node in _topological(root, through_stops=True):
        if not np.isfinite(node.value).all():
            return node
    return None


def check_finite(root: Node) -> None:
    if not np.isfinite(root.value).all():
        bad = first_nonfinite(root) or root
        raise NonFiniteError(bad.op, bad.shape)


def backward(root: Node) -> None:
    if root.value.size != 1:
        raise ShapeError("backward", root.shape)
    check_finite(root)
    order = _topological(root)
    for node in order:
        node.grad = None
    root.grad = np.ones_like(root.value)
    for node in reversed(order):
        if node.grad is None or node.stop:
            continue
        for parent, vjp in node.parents:
            if parent.op == "const":
                continue
            contrib = vjp(node.grad)
            parent.grad = contrib if parent.grad is None else parent.grad + contrib


def value_and_grad(loss: Callable[..., Node], params: Sequence[np.ndarray]):
    """Evaluate ``loss(*param_nodes)`` and return ``(value, [grad per param])``."""
    leaves = [Node(np.array(p, dtype=np.float64)) for p in params]
    out = loss(*leaves)
    backward(out)
    grads = [np.zeros_like(n.value) if n.grad is None else n.grad.reshape(n.shape)
             for n in leaves]
    return float(out.value), grads


def finite_difference_grad(loss: Callable[..., Node], params: Sequence[np.ndarray],
                           h: float = 1e-5, freeze_stops: bool = True) -> list[np.ndarray]:
    """Central-difference gradient estimate, one coordinate at a time.

    With ``freeze_stops`` every ``stop_gradient`` output is pinned to its value
    at the unperturbed point, so the estimate targets the same quantity as
    :func:`backward`. The loss must build the same graph on every call.
    """
    global _STOP_TAPE
    if h <= 0:
        raise ValueError("h must be positive")
    values = [np.array(p, dtype=np.float64) for p in params]
    tape = None
    if freeze_stops:
        _STOP_TAPE = tape = []
        try:
            loss(*[Node(v) for v in values])
        finally:
            _STOP_TAPE = None

    def f():
        global _STOP_TAPE
        _STOP_TAPE = None if tape is None else iter(tape)
        try:
            out = as_node(loss(*[Node(v) for v in values]))
        finally:
            _STOP_TAPE = None
        check_finite(out)
        return float(out.value)

    grads = []
    for v in values:
        g = np.zeros_like(v)
        flat, gflat = v.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = f()
            flat[i] = orig - h
            down = f()
            flat[i] = orig
            gflat[i] = (up - down) / (2 * h)
        grads.append(g)
    return grads


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-12) -> float:
    """Max absolute deviation scaled by the larger of the two gradients' max magnitude."""
    a, b = np.asarray(a), np.asarray(b)
    scale = np.maximum(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0))
    return float(np.abs(a - b).max(initial=0.0) / np.maximum(scale, floor))
