"""Reverse-mode automatic differentiation over dense float64 arrays.

Every backward rule is written in terms of :class:`Tensor` operations, so the
gradients returned by :func:`grad` with ``create_graph=True`` are ordinary graph
nodes and can be differentiated again.  This is what makes a loss containing an
input-gradient of a network trainable.

Example::

    x = Tensor([3.0], requires_grad=True)
    (g,) = grad((x * x).sum(), [x], create_graph=True)
    (h,) = grad(g.sum(), [x])          # h.data == [2.0]
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "grad",
    "no_grad",
    "enable_grad",
    "is_recording",
    "topological_order",
    "finite_diff_check",
    "as_tensor",
    "matmul",
    "add",
    "sub",
    "mul",
    "scale",
    "neg",
    "relu",
    "softplus",
    "sigmoid",
    "exp",
    "log",
    "reciprocal",
    "tsum",
    "mean",
    "sqnorm",
    "log_softmax",
    "logsumexp",
    "gather",
    "concat",
    "transpose",
    "reshape",
    "broadcast_to",
]

_RECORDING = True


class ShapeError(ValueError):
    """Raised when operand shapes do not conform for an operation."""


def no_grad():
    """Disable graph recording inside the block."""
    return _recording(False)


def enable_grad():
    """Re-enable recording, e.g. for an input gradient inside ``no_grad``."""
    return _recording(True)


@contextlib.contextmanager
def _recording(flag: bool):
    global _RECORDING
    prev = _RECORDING
    _RECORDING = flag
    try:
        yield
    finally:
        _RECORDING = prev


def is_recording() -> bool:
    return _RECORDING


_NEEDED: set[int] | None = None


def _wants(t: Tensor) -> bool:
    return t.requires_grad and (_NEEDED is None or id(t) in _NEEDED)


class Tensor:
    """A float64 array plus the record of how it was produced."""

    __slots__ = ("data", "requires_grad", "_parents", "_backward", "op")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[Tensor], Sequence[Tensor | None]] | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __repr__(self) -> str:
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{rg})"

    def __len__(self) -> int:
        return len(self.data)

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
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(other, self)

    def __truediv__(self, other):
        if np.isscalar(other):
            return scale(self, 1.0 / float(other))
        return mul(self, reciprocal(as_tensor(other)))

    def __rtruediv__(self, other):
        return mul(as_tensor(other), reciprocal(self))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return gather(self, key)

    @property
    def T(self) -> Tensor:
        return transpose(self)

    def sum(self, axis=None) -> Tensor:
        return tsum(self, axis)

    def mean(self, axis=None) -> Tensor:
        return mean(self, axis)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward, op: str) -> Tensor:
    out = Tensor(data)
    out.op = op
    if _RECORDING and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(g: Tensor, shape: tuple[int, ...]) -> Tensor:
    """Sum ``g`` down to ``shape`` (reverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    ndiff = g.ndim - len(shape)
    axes = tuple(range(ndiff)) + tuple(
        i + ndiff for i, n in enumerate(shape) if n == 1 and g.shape[i + ndiff] != 1
    )
    return reshape(tsum(g, axes), shape)


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    sa, sb = a.data.shape, b.data.shape
    if sa == sb or not sb:
        return sa
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not conform") from None


# ---------------------------------------------------------------------------
# forward ops


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)

    def backward(g):
        ga = _unbroadcast(g, a.shape) if _wants(a) else None
        gb = _unbroadcast(g, b.shape) if _wants(b) else None
        return ga, gb

    return _make(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)

    def backward(g):
        ga = _unbroadcast(g, a.shape) if _wants(a) else None
        gb = _unbroadcast(neg(g), b.shape) if _wants(b) else None
        return ga, gb

    return _make(a.data - b.data, (a, b), backward, "sub")


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (neg(g),), "neg")


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a constant scalar."""
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (scale(g, c),), "scale")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)

    def backward(g):
        ga = _unbroadcast(mul(g, b), a.shape) if _wants(a) else None
        gb = _unbroadcast(mul(g, a), b.shape) if _wants(b) else None
        return ga, gb

    return _make(a.data * b.data, (a, b), backward, "mul")


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform")

    def backward(g):
        ga = matmul(g, transpose(b)) if _wants(a) else None
        gb = matmul(transpose(a), g) if _wants(b) else None
        return ga, gb

    return _make(a.data @ b.data, (a, b), backward, "matmul")


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ShapeError(f"transpose: expected a matrix, got shape {a.shape}")
    return _make(a.data.T, (a,), lambda g: (transpose(g),), "transpose")


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    src = a.shape
    try:
        data = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {src} to {shape}") from None
    return _make(data, (a,), lambda g: (reshape(g, src),), "reshape")


def broadcast_to(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    src = a.shape
    try:
        data = np.broadcast_to(a.data, shape)
    except ValueError:
        raise ShapeError(f"broadcast_to: cannot broadcast {src} to {shape}") from None
    return _make(np.array(data), (a,), lambda g: (_unbroadcast(g, src),), "broadcast_to")


def relu(a: Tensor) -> Tensor:
    # the mask is a constant: second derivative is zero almost everywhere
    mask = Tensor(np.greater(a.data, 0.0).astype(np.float64))
    return _make(np.maximum(a.data, 0.0), (a,), lambda g: (mul(g, mask),), "relu")


def sigmoid(a: Tensor) -> Tensor:
    out_data = np.where(
        a.data >= 0,
        1.0 / (1.0 + np.exp(-np.abs(a.data))),
        np.exp(-np.abs(a.data)) / (1.0 + np.exp(-np.abs(a.data))),
    )
    holder: list[Tensor] = []

    def backward(g):
        s = holder[0]
        return (mul(g, mul(s, sub(1.0, s))),)

    out = _make(out_data, (a,), backward, "sigmoid")
    holder.append(out)
    return out


def softplus(a: Tensor) -> Tensor:
    data = np.logaddexp(0.0, a.data)
    return _make(data, (a,), lambda g: (mul(g, sigmoid(a)),), "softplus")


def exp(a: Tensor) -> Tensor:
    holder: list[Tensor] = []
    out = _make(np.exp(a.data), (a,), lambda g: (mul(g, holder[0]),), "exp")
    holder.append(out)
    return out


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise ValueError("log: non-positive input")
    return _make(np.log(a.data), (a,), lambda g: (mul(g, reciprocal(a)),), "log")


def reciprocal(a: Tensor) -> Tensor:
    holder: list[Tensor] = []

    def backward(g):
        r = holder[0]
        return (neg(mul(g, mul(r, r))),)

    out = _make(1.0 / a.data, (a,), backward, "reciprocal")
    holder.append(out)
    return out


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a: Tensor, axis=None) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    src = a.shape
    kept = tuple(1 if i in axes else n for i, n in enumerate(src))

    def backward(g):
        return (broadcast_to(reshape(g, kept), src),)

    return _make(np.sum(a.data, axis=axes), (a,), backward, "sum")


def mean(a: Tensor, axis=None) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return scale(tsum(a, axes), 1.0 / count)


def sqnorm(a: Tensor, axis=None) -> Tensor:
    """Sum of squares over ``axis`` (all axes by default)."""
    return tsum(mul(a, a), axis)


def logsumexp(a: Tensor, axis: int = -1) -> Tensor:
    ax = axis % a.ndim
    m = np.max(a.data, axis=ax, keepdims=True)
    data = np.squeeze(m, ax) + np.log(np.sum(np.exp(a.data - m), axis=ax))
    src = a.shape
    kept = tuple(1 if i == ax else n for i, n in enumerate(src))
    holder: list[Tensor] = []

    def backward(g):
        w = exp(sub(a, reshape(holder[0], kept)))
        return (mul(broadcast_to(reshape(g, kept), src), w),)

    out = _make(data, (a,), backward, "logsumexp")
    holder.append(out)
    return out


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    ax = axis % a.ndim
    m = np.max(a.data, axis=ax, keepdims=True)
    shifted = a.data - m
    data = shifted - np.log(np.sum(np.exp(shifted), axis=ax, keepdims=True))
    src = a.shape
    kept = tuple(1 if i == ax else n for i, n in enumerate(src))
    holder: list[Tensor] = []

    def backward(g):
        p = exp(holder[0])
        gs = broadcast_to(reshape(tsum(g, ax), kept), src)
        return (sub(g, mul(p, gs)),)

    out = _make(data, (a,), backward, "log_softmax")
    holder.append(out)
    return out


def gather(a: Tensor, key) -> Tensor:
    """Index with any numpy key; the adjoint scatters back into zeros."""
    src = a.shape
    try:
        data = a.data[key]
    except IndexError as exc:
        raise ShapeError(f"gather: bad index for shape {src}: {exc}") from None
    return _make(np.array(data), (a,), lambda g: (_scatter(g, key, src),), "gather")


def _scatter(g: Tensor, key, shape) -> Tensor:
    data = np.zeros(shape)
    np.add.at(data, key, g.data)
    return _make(data, (g,), lambda h: (gather(h, key),), "scatter")


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat: no inputs")
    ax = axis % ts[0].ndim
    for t in ts[1:]:
        if t.ndim != ts[0].ndim or any(
            n != m for i, (n, m) in enumerate(zip(t.shape, ts[0].shape)) if i != ax
        ):
            raise ShapeError(f"concat: shapes {ts[0].shape} and {t.shape} do not conform")
    bounds = np.cumsum([0] + [t.shape[ax] for t in ts])

    def backward(g):
        out = []
        for t, lo, hi in zip(ts, bounds[:-1], bounds[1:]):
            if not _wants(t):
                out.append(None)
                continue
            key = [slice(None)] * g.ndim
            key[ax] = slice(int(lo), int(hi))
            out.append(gather(g, tuple(key)))
        return out

    data = np.concatenate([t.data for t in ts], axis=ax)
    return _make(data, tuple(ts), backward, "concat")


# ---------------------------------------------------------------------------
# backward pass


def topological_order(output: Tensor) -> list[Tensor]:
    """Nodes reachable from ``output`` through recorded parents, inputs first."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(output, False)]
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
    return order


def grad(
    output: Tensor,
    wrt: Iterable[Tensor],
    create_graph: bool = False,
) -> list[Tensor]:
    """Gradients of a scalar ``output`` with respect to each node in ``wrt``.

    With ``create_graph=True`` the returned tensors are themselves recorded and
    may be differentiated again.  Nodes that ``output`` does not depend on get
    a zero gradient of matching shape.
    """
    wrt = list(wrt)
    if output.data.size != 1:
        raise ShapeError(f"grad: output must be scalar, got shape {output.shape}")
    targets = {id(w) for w in wrt}
    collected: dict[int, Tensor] = {}
    if output.requires_grad:
        order = topological_order(output)
        # only nodes with a requested input among their ancestors carry gradient
        needed: set[int] = set()
        for node in order:
            if id(node) in targets or any(id(p) in needed for p in node._parents):
                needed.add(id(node))
        grads: dict[int, Tensor] = {id(output): Tensor(np.ones(output.shape))}
        global _NEEDED
        prev_needed, _NEEDED = _NEEDED, needed
        try:
            _backward_pass(order, grads, targets, collected, needed, create_graph)
        finally:
            _NEEDED = prev_needed
    elif id(output) in targets:
        collected[id(output)] = Tensor(np.ones(output.shape))
    return [collected.get(id(w), Tensor(np.zeros(w.shape))) for w in wrt]


def _backward_pass(order, grads, targets, collected, needed, create_graph):
    with _recording(create_graph):
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if id(node) in targets:
                collected[id(node)] = g
            if node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or id(parent) not in needed:
                    continue
                prev = grads.get(id(parent))
                grads[id(parent)] = pg if prev is None else add(prev, pg)


def finite_diff_check(
    f: Callable[[Tensor], Tensor], x, h: float = 1e-5
) -> float:
    """Max relative error between ``grad(f, x)`` and central differences.

    The relative error of a component is ``|analytic - numeric| / max(1, |numeric|)``.
    """
    if h <= 0:
        raise ValueError("finite_diff_check: h must be positive")
    x0 = np.array(as_tensor(x).data, dtype=np.float64)
    xt = Tensor(x0.copy(), requires_grad=True)
    out = f(xt)
    if not np.all(np.isfinite(out.data)):
        raise ValueError("finite_diff_check: f(x) is not finite")
    (analytic,) = grad(out, [xt])
    numeric = np.zeros_like(x0)
    flat = numeric.reshape(-1)
    # f is evaluated with recording on: it may itself take gradients inside
    for i in range(x0.size):
        xp = x0.copy().reshape(-1)
        xm = x0.copy().reshape(-1)
        xp[i] += h
        xm[i] -= h
        fp = f(Tensor(xp.reshape(x0.shape))).item()
        fm = f(Tensor(xm.reshape(x0.shape))).item()
        flat[i] = (fp - fm) / (2.0 * h)
    err = np.abs(analytic.data - numeric) / np.maximum(1.0, np.abs(numeric))
    return float(np.max(err)) if err.size else 0.0
