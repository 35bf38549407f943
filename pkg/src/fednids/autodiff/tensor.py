"""Dense float64 tensors with a recorded computation graph.

Every primitive registers a vector-Jacobian product written in terms of other
primitives, so a backward sweep run while recording is itself a graph that can
be differentiated again (gradient-of-gradient objectives need this).
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when an op receives incompatible shapes."""

    def __init__(self, op: str, *shapes: tuple[int, ...]):
        self.op = op
        self.shapes = shapes
        shown = ", ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {shown}")


class GradError(RuntimeError):
    """Raised for invalid gradient requests (non-scalar output, detached inputs)."""


_state = threading.local()


def is_recording() -> bool:
    return getattr(_state, "recording", True)


@contextmanager
def recording(enabled: bool):
    """Enable or disable graph recording for ops created inside the block."""
    prev = is_recording()
    _state.recording = enabled
    try:
        yield
    finally:
        _state.recording = prev


def no_grad():
    return recording(False)


VJP = Callable[["Tensor"], Sequence["Tensor | None"]]


class Tensor:
    __slots__ = ("data", "requires_grad", "parents", "vjp", "op", "from_unrecorded_sweep")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.parents: tuple[Tensor, ...] = ()
        self.vjp: VJP | None = None
        self.op = "leaf"
        self.from_unrecorded_sweep = False

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def T(self) -> Tensor:
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({np.array2string(self.data, precision=6)}{flag}, op={self.op})"

    # -- operators ----------------------------------------------------------
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

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def sum(self, axis=None, keepdims=False) -> Tensor:
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False) -> Tensor:
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], vjp: VJP, op: str) -> Tensor:
    out = Tensor(data)
    out.op = op
    out.from_unrecorded_sweep = any(p.from_unrecorded_sweep for p in parents)
    if is_recording() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = parents
        out.vjp = vjp
    return out


def _reduce_to(arr: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if arr.shape == shape:
        return arr
    lead = arr.ndim - len(shape)
    if lead:
        arr = arr.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and arr.shape[i] != 1)
    if axes:
        arr = arr.sum(axis=axes, keepdims=True)
    return arr.reshape(shape)


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# -- shape plumbing -----------------------------------------------------------


def sum_to(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    """Sum a broadcast tensor back down to ``shape``."""
    a = as_tensor(a)
    shape = tuple(shape)
    if a.shape == shape:
        return a
    return _make(_reduce_to(a.data, shape), (a,), lambda g: (broadcast_to(g, a.shape),), "sum_to")


def broadcast_to(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    a = as_tensor(a)
    shape = tuple(shape)
    if a.shape == shape:
        return a
    try:
        data = np.broadcast_to(a.data, shape).copy()
    except ValueError:
        raise ShapeError("broadcast_to", a.shape, shape) from None
    return _make(data, (a,), lambda g: (sum_to(g, a.shape),), "broadcast_to")


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    a = as_tensor(a)
    try:
        data = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", a.shape, tuple(shape)) from None
    return _make(data, (a,), lambda g: (reshape(g, a.shape),), "reshape")


def transpose(a: Tensor) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2:
        raise ShapeError("transpose", a.shape)
    return _make(a.data.T.copy(), (a,), lambda g: (transpose(g),), "transpose")


# -- arithmetic ---------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    return _make(
        a.data + b.data,
        (a, b),
        lambda g: (
            sum_to(g, a.shape) if a.requires_grad else None,
            sum_to(g, b.shape) if b.requires_grad else None,
        ),
        "add",
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    return _make(
        a.data - b.data,
        (a, b),
        lambda g: (
            sum_to(g, a.shape) if a.requires_grad else None,
            neg(sum_to(g, b.shape)) if b.requires_grad else None,
        ),
        "sub",
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    return _make(
        a.data * b.data,
        (a, b),
        lambda g: (
            sum_to(mul(g, b), a.shape) if a.requires_grad else None,
            sum_to(mul(g, a), b.shape) if b.requires_grad else None,
        ),
        "mul",
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)
    return _make(
        a.data / b.data,
        (a, b),
        lambda g: (
            sum_to(div(g, b), a.shape) if a.requires_grad else None,
            sum_to(neg(div(mul(g, a), mul(b, b))), b.shape) if b.requires_grad else None,
        ),
        "div",
    )


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (neg(g),), "neg")


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    p = float(p)
    if p == 1.0:
        return a
    return _make(a.data**p, (a,), lambda g: (mul(g, mul(p, power(a, p - 1.0))),), "pow")


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    return _make(
        a.data @ b.data,
        (a, b),
        lambda g: (
            matmul(g, transpose(b)) if a.requires_grad else None,
            matmul(transpose(a), g) if b.requires_grad else None,
        ),
        "matmul",
    )


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = reshape(g, np.expand_dims(a.data.sum(axis=axis), axis).shape)
        elif axis is None and not keepdims:
            g = reshape(g, (1,) * a.ndim)
        return (broadcast_to(g, a.shape),)

    return _make(np.asarray(data), (a,), vjp, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    count = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / float(count))


# -- elementwise nonlinearities -------------------------------------------------


def exp(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.exp(a.data)
    holder: list[Tensor] = []

    def vjp(g):
        return (mul(g, holder[0]),)

    out = _make(out_data, (a,), vjp, "exp")
    holder.append(out)
    return out


def log(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.log(a.data), (a,), lambda g: (div(g, a),), "log")


def sqrt(a) -> Tensor:
    """Square root; the derivative at exactly 0 is taken as 0."""
    a = as_tensor(a)
    out_data = np.sqrt(a.data)
    holder: list[Tensor] = []

    def vjp(g):
        out = holder[0]
        zero = out.data == 0
        if not zero.any():
            return (div(g, mul(2.0, out)),)
        safe = add(out, zero.astype(np.float64))
        return (mul(div(g, mul(2.0, safe)), (~zero).astype(np.float64)),)

    out = _make(out_data, (a,), vjp, "sqrt")
    holder.append(out)
    return out


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = (a.data > 0).astype(np.float64)
    # select rather than multiply so that -inf maps to 0, not nan
    return _make(np.where(mask > 0, a.data, 0.0), (a,), lambda g: (mul(g, mask),), "relu")


def absolute(a) -> Tensor:
    a = as_tensor(a)
    sign = np.sign(a.data)
    return _make(np.abs(a.data), (a,), lambda g: (mul(g, sign),), "abs")


def clamp(a, lo: float | None = None, hi: float | None = None) -> Tensor:
    a = as_tensor(a)
    data = np.clip(a.data, lo, hi)
    mask = np.ones_like(a.data)
    if lo is not None:
        mask *= a.data >= lo
    if hi is not None:
        mask *= a.data <= hi
    return _make(data, (a,), lambda g: (mul(g, mask),), "clamp")


def maximum(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("maximum", a, b)
    take_a = (a.data >= b.data).astype(np.float64)
    return _make(
        np.maximum(a.data, b.data),
        (a, b),
        lambda g: (sum_to(mul(g, take_a), a.shape), sum_to(mul(g, 1.0 - take_a), b.shape)),
        "maximum",
    )


def minimum(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("minimum", a, b)
    take_a = (a.data <= b.data).astype(np.float64)
    return _make(
        np.minimum(a.data, b.data),
        (a, b),
        lambda g: (sum_to(mul(g, take_a), a.shape), sum_to(mul(g, 1.0 - take_a), b.shape)),
        "minimum",
    )


def _extreme(a: Tensor, axis, keepdims: bool, pick: Callable, op: str) -> Tensor:
    # subgradient routed to the first extreme index along ``axis``
    if axis is None:
        flat = a.data.reshape(-1)
        mask = np.zeros_like(flat)
        mask[pick(flat)] = 1.0
        mask = mask.reshape(a.shape)
        data = np.asarray(flat[pick(flat)])
    else:
        idx = np.expand_dims(pick(a.data, axis=axis), axis)
        mask = np.zeros_like(a.data)
        np.put_along_axis(mask, idx, 1.0, axis=axis)
        data = np.take_along_axis(a.data, idx, axis=axis)
        if not keepdims:
            data = np.squeeze(data, axis=axis)

    def vjp(g):
        if axis is None:
            g = reshape(g, (1,) * a.ndim)
        elif not keepdims:
            g = reshape(g, np.expand_dims(a.data.sum(axis=axis), axis).shape)
        return (mul(broadcast_to(g, a.shape), mask),)

    return _make(np.asarray(data), (a,), vjp, op)


def tmax(a, axis=None, keepdims: bool = False) -> Tensor:
    return _extreme(as_tensor(a), axis, keepdims, np.argmax, "max")


def tmin(a, axis=None, keepdims: bool = False) -> Tensor:
    return _extreme(as_tensor(a), axis, keepdims, np.argmin, "min")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    holder: list[Tensor] = []
    out = _make(
        np.tanh(a.data),
        (a,),
        lambda g: (mul(g, sub(1.0, mul(holder[0], holder[0]))),),
        "tanh",
    )
    holder.append(out)
    return out


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    holder: list[Tensor] = []
    out = _make(
        _sigmoid_np(a.data),
        (a,),
        lambda g: (mul(g, mul(holder[0], sub(1.0, holder[0]))),),
        "sigmoid",
    )
    holder.append(out)
    return out


def softplus(a) -> Tensor:
    """log(1 + exp(a)), computed without overflow."""
    a = as_tensor(a)
    data = np.maximum(a.data, 0.0) + np.log1p(np.exp(-np.abs(a.data)))
    return _make(data, (a,), lambda g: (mul(g, sigmoid(a)),), "softplus")


# -- composites ---------------------------------------------------------------


def softmax(z, axis: int = -1) -> Tensor:
    z = as_tensor(z)
    shift = z.data.max(axis=axis, keepdims=True)
    e = exp(sub(z, shift))
    return div(e, tsum(e, axis=axis, keepdims=True))


def log_softmax(z, axis: int = -1) -> Tensor:
    z = as_tensor(z)
    shifted = sub(z, z.data.max(axis=axis, keepdims=True))
    return sub(shifted, log(tsum(exp(shifted), axis=axis, keepdims=True)))


def inner(a, b) -> Tensor:
    return tsum(mul(a, b))


def l2_norm(a) -> Tensor:
    """Euclidean norm over all entries; derivative at the origin is 0."""
    a = as_tensor(a)
    return sqrt(tsum(mul(a, a)))


def global_norm(tensors: Iterable[Tensor]) -> Tensor:
    """Euclidean norm of the concatenation of several tensors."""
    total = None
    for t in tensors:
        sq = tsum(mul(t, t))
        total = sq if total is None else add(total, sq)
    if total is None:
        raise ValueError("global_norm of an empty sequence")
    return sqrt(total)


# -- reverse sweep ------------------------------------------------------------


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def _has_unrecorded_sweep(root: Tensor) -> bool:
    seen: set[int] = set()
    stack = [root]
    while stack:
        node = stack.pop()
        if id(node) in seen:
            continue
        seen.add(id(node))
        if node.from_unrecorded_sweep:
            return True
        stack.extend(node.parents)
    return False


def grad(
    output: Tensor,
    wrt: Sequence[Tensor],
    create_graph: bool = False,
    allow_unused: bool = False,
) -> list[Tensor]:
    """Reverse-mode derivative of a scalar ``output`` with respect to ``wrt``.

    With ``create_graph=True`` the sweep is recorded, so the returned gradients
    can themselves be differentiated.

    Raises:
        GradError: output is not a scalar, or some ``wrt`` tensor is not on the
            graph of ``output`` (unless ``allow_unused``).
    """
    if output.size != 1:
        raise GradError(f"grad requires a scalar output, got shape {output.shape}")
    wrt = list(wrt)
    wanted = {id(t) for t in wrt}
    if not output.requires_grad:
        if allow_unused:
            return [Tensor(np.zeros_like(t.data)) for t in wrt]
        raise GradError(_detached_message(output))

    order = _topo_order(output)
    grads: dict[int, Tensor] = {id(output): Tensor(np.ones_like(output.data))}
    kept: dict[int, Tensor] = {}
    with recording(create_graph):
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if id(node) in wanted:
                kept[id(node)] = g
            if node.vjp is None:
                continue
            for parent, pg in zip(node.parents, node.vjp(g)):
                if pg is None or not parent.requires_grad:
                    continue
                prev = grads.get(id(parent))
                grads[id(parent)] = pg if prev is None else add(prev, pg)

    result = []
    for t in wrt:
        g = kept.get(id(t))
        if g is None:
            if not allow_unused:
                raise GradError(_detached_message(output))
            g = Tensor(np.zeros_like(t.data))
        if not create_graph:
            g = Tensor(g.data)
            g.from_unrecorded_sweep = True
        result.append(g)
    return result


def _detached_message(output: Tensor) -> str:
    if _has_unrecorded_sweep(output):
        return (
            "objective depends on gradients from a backward sweep that was not "
            "recorded; recompute them with create_graph=True"
        )
    return "requested tensor is not on the graph of the output (detached node)"
