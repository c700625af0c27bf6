"""Dense float64 tensors with a dynamic reverse-mode tape.

Every differentiable operation returns a new :class:`Tensor` that remembers
its parents and a closure mapping the output adjoint to one adjoint per
parent.  :meth:`Tensor.backward` sorts the reachable graph topologically and
replays those closures in reverse, accumulating into ``.grad``.

Broadcasting is deliberately narrow: two operands must either share a shape
or one shape must be a trailing suffix of the other (bias style).
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError

_RECORDING = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (evaluation, oracles)."""
    global _RECORDING
    previous = _RECORDING
    _RECORDING = False
    try:
        yield
    finally:
        _RECORDING = previous


class Tensor:
    """A float64 array with optional gradient tracking."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

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

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def backward(self) -> None:
        """Accumulate d(self)/d(node) into ``.grad`` of every reachable node.

        Gradients add onto whatever ``.grad`` already holds, so calling this
        twice on the same graph without zeroing doubles them.
        """
        if self.data.size != 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {self.shape}")
        order = _topological_order(self)
        adjoints = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = adjoints.pop(id(node), None)
            if g is None:
                continue
            node.grad = g.copy() if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in adjoints:
                    adjoints[key] = adjoints[key] + pg
                else:
                    adjoints[key] = pg


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def custom_op(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    """Wrap ``data`` as the output of an operation with a hand-written adjoint.

    ``backward(g)`` must return one array (or None) per parent.
    """
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    track = _RECORDING and any(p.requires_grad for p in parents)
    out.requires_grad = track
    out._parents = tuple(parents) if track else ()
    out._backward = backward if track else None
    return out


# ---------------------------------------------------------------- elementwise


def _broadcast_kind(a: np.ndarray, b: np.ndarray, name: str) -> str:
    if a.shape == b.shape:
        return "same"
    if b.ndim == 0 or (b.ndim < a.ndim and a.shape[a.ndim - b.ndim:] == b.shape):
        return "b_bias"
    if a.ndim == 0 or (a.ndim < b.ndim and b.shape[b.ndim - a.ndim:] == a.shape):
        return "a_bias"
    raise DimensionError(f"{name}: incompatible shapes {a.shape} and {b.shape}")


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead))).reshape(shape)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_kind(a.data, b.data, "add")
    sa, sb = a.shape, b.shape
    return custom_op(a.data + b.data, (a, b),
                     lambda g: (_reduce_to(g, sa), _reduce_to(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_kind(a.data, b.data, "sub")
    sa, sb = a.shape, b.shape
    return custom_op(a.data - b.data, (a, b),
                     lambda g: (_reduce_to(g, sa), -_reduce_to(g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_kind(a.data, b.data, "mul")
    ad, bd = a.data, b.data

    def backward(g):
        ga = _reduce_to(g * bd, ad.shape) if a.requires_grad else None
        gb = _reduce_to(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return custom_op(ad * bd, (a, b), backward, "mul")


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return custom_op(a.data * c, (a,), lambda g: (g * c,), "scale")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    y = np.tanh(a.data)
    return custom_op(y, (a,), lambda g: (g * (1.0 - y * y),), "tanh")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    y = 0.5 * (np.tanh(0.5 * a.data) + 1.0)
    return custom_op(y, (a,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def exp(a) -> Tensor:
    a = as_tensor(a)
    y = np.exp(a.data)
    return custom_op(y, (a,), lambda g: (g * y,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    return custom_op(np.log(x), (a,), lambda g: (g / x,), "log")


def where(mask: np.ndarray, a, b) -> Tensor:
    """Select ``a`` where ``mask`` is true and ``b`` elsewhere (mask is constant)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"where: incompatible shapes {a.shape} and {b.shape}")
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), a.shape)
    return custom_op(np.where(mask, a.data, b.data), (a, b),
                     lambda g: (np.where(mask, g, 0.0), np.where(mask, 0.0, g)), "where")


# ------------------------------------------------------------------- algebra


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        ga = g @ bd.T if a.requires_grad else None
        gb = ad.T @ g if b.requires_grad else None
        return ga, gb

    return custom_op(ad @ bd, (a, b), backward, "matmul")


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2:
        raise DimensionError(f"transpose expects a matrix, got shape {a.shape}")
    return custom_op(a.data.T.copy(), (a,), lambda g: (g.T,), "transpose")


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    try:
        y = a.data.reshape(tuple(shape))
    except ValueError as exc:
        raise DimensionError(f"reshape: cannot view {old} as {tuple(shape)}") from exc
    return custom_op(y, (a,), lambda g: (g.reshape(old),), "reshape")


def getitem(a, index) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    y = np.array(a.data[index])

    basic = _is_basic_index(index)

    def backward(g):
        full = np.zeros(shape)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return custom_op(y, (a,), backward, "getitem")


def _is_basic_index(index) -> bool:
    parts = index if isinstance(index, tuple) else (index,)
    return all(isinstance(p, (int, np.integer, slice)) or p is None or p is Ellipsis for p in parts)


def take_rows(table, ids: np.ndarray) -> Tensor:
    """Gather rows of a matrix; output shape is ``ids.shape + (cols,)``."""
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    rows, cols = table.shape
    flat = ids.reshape(-1)

    def backward(g):
        full = np.zeros((rows, cols))
        np.add.at(full, flat, g.reshape(-1, cols))
        return (full,)

    return custom_op(table.data[flat].reshape(ids.shape + (cols,)), (table,), backward, "take_rows")


def concat(tensors: Iterable, axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ContractError("concat of an empty list")
    try:
        y = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        shapes = [t.shape for t in tensors]
        raise DimensionError(f"concat: incompatible shapes {shapes}") from exc
    ax = axis % y.ndim
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=ax))

    return custom_op(y, tensors, backward, "concat")


def stack(tensors: Iterable, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ContractError("stack of an empty list")
    try:
        y = np.stack([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        shapes = [t.shape for t in tensors]
        raise DimensionError(f"stack: incompatible shapes {shapes}") from exc
    ax = axis % y.ndim

    def backward(g):
        return tuple(np.moveaxis(g, ax, 0))

    return custom_op(y, tensors, backward, "stack")


def weighted_sum(weights, values) -> Tensor:
    """Contract ``weights[..., t]`` with ``values[..., t, d]`` over ``t``."""
    weights, values = as_tensor(weights), as_tensor(values)
    if values.ndim != weights.ndim + 1 or values.shape[:-1] != weights.shape:
        raise DimensionError(f"weighted_sum: weights {weights.shape} do not index values {values.shape}")
    w, v = weights.data, values.data
    y = np.einsum("...t,...td->...d", w, v)

    def backward(g):
        gw = np.einsum("...d,...td->...t", g, v) if weights.requires_grad else None
        gv = w[..., :, None] * g[..., None, :] if values.requires_grad else None
        return gw, gv

    return custom_op(y, (weights, values), backward, "weighted_sum")


# ---------------------------------------------------------------- reductions


def _check_axis(a: Tensor, axis) -> int | None:
    if axis is None:
        return None
    if not -a.ndim <= axis < a.ndim or a.ndim == 0:
        raise DimensionError(f"axis {axis} out of range for shape {a.shape}")
    return axis % a.ndim


def sum(a, axis: int | None = None) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    ax = _check_axis(a, axis)
    shape = a.shape

    def backward(g):
        if ax is not None:
            g = np.expand_dims(g, ax)
        return (np.broadcast_to(g, shape).copy(),)

    return custom_op(np.array(a.data.sum(axis=ax)), (a,), backward, "sum")


def mean(a, axis: int | None = None) -> Tensor:
    a = as_tensor(a)
    ax = _check_axis(a, axis)
    n = a.size if ax is None else a.shape[ax]
    return scale(sum(a, axis), 1.0 / n)


def max(a, axis: int | None = None) -> Tensor:  # noqa: A001
    """Maximum; the gradient goes to the first maximal entry only."""
    a = as_tensor(a)
    ax = _check_axis(a, axis)
    x = a.data
    if ax is None:
        idx = int(np.argmax(x))
        y = np.array(x.reshape(-1)[idx])

        def backward(g):
            full = np.zeros(x.size)
            full[idx] = g
            return (full.reshape(x.shape),)
    else:
        idx = np.expand_dims(np.argmax(x, axis=ax), ax)
        y = np.take_along_axis(x, idx, axis=ax).squeeze(ax)

        def backward(g):
            full = np.zeros(x.shape)
            np.put_along_axis(full, idx, np.expand_dims(g, ax), axis=ax)
            return (full,)

    return custom_op(y, (a,), backward, "max")


# -------------------------------------------------------------------- oracle


def finite_diff_grad(f: Callable[[Tensor], object], x, h: float = 1e-5) -> Tensor:
    """Central-difference gradient of a scalar function at ``x``.

    ``f`` is called on fresh tensors; ``x`` itself is never modified.
    """
    if h <= 0:
        raise ContractError("finite difference step must be positive")
    base = as_tensor(x).data
    flat = base.reshape(-1)
    out = np.empty(flat.size)

    def value(arr):
        with no_grad():
            r = f(Tensor(arr.reshape(base.shape)))
        return float(r.data.reshape(())) if isinstance(r, Tensor) else float(r)

    for i in range(flat.size):
        plus = flat.copy()
        plus[i] += h
        minus = flat.copy()
        minus[i] -= h
        out[i] = (value(plus) - value(minus)) / (2.0 * h)
    return Tensor(out.reshape(base.shape))
