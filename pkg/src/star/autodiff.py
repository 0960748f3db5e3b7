"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

Implements exactly the operations the model needs: broadcasting arithmetic,
(batched) matmul, the usual pointwise nonlinearities, axis reductions, shape
ops, gather, and stable softmax/logsumexp helpers. A Tensor wraps an ndarray;
``backward()`` on a scalar Tensor accumulates gradients into every reachable
Tensor created with ``requires_grad=True``.

Graph recording can be suspended with ``no_grad()`` for inference paths.
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

Array = np.ndarray

_GRAD_ENABLED = True


@contextmanager
def no_grad():
    """Suspend graph recording inside the context (forward values only)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _unbroadcast(grad: Array, shape: tuple[int, ...]) -> Array:
    """Reduce ``grad`` back to ``shape`` by summing broadcast axes."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """An ndarray with an optional spot on the autodiff tape."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: Array | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[Array], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # -- graph ----------------------------------------------------------

    def _accumulate(self, grad: Array) -> None:
        if self.grad is None:
            self.grad = np.array(grad, dtype=np.float64)
        else:
            self.grad += grad

    def backward(self) -> None:
        """Backpropagate from a scalar; accumulates into ``.grad`` fields."""
        if self.size != 1:
            raise ValueError("backward() requires a scalar Tensor")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self._accumulate(np.ones_like(self.data))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- arithmetic -----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __truediv__(self, other):
        return mul(self, power(_ensure(other), -1.0))

    def __rtruediv__(self, other):
        return mul(_ensure(other), power(self, -1.0))

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    # -- method aliases ---------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)


def _ensure(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: Array, parents: Sequence[Tensor], backward: Callable[[Array], None]) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


# -- primitive ops --------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _ensure(a), _ensure(b)
    out_data = a.data + b.data

    def backward(g: Array) -> None:
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _make(out_data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _ensure(a), _ensure(b)
    out_data = a.data * b.data

    def backward(g: Array) -> None:
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _make(out_data, (a, b), backward)


def power(a, exponent: float) -> Tensor:
    a = _ensure(a)
    e = float(exponent)
    out_data = a.data ** e

    def backward(g: Array) -> None:
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * e * a.data ** (e - 1.0), a.shape))

    return _make(out_data, (a,), backward)


def matmul(a, b) -> Tensor:
    """np.matmul semantics for operands of ndim >= 2, with batch broadcasting."""
    a, b = _ensure(a), _ensure(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul requires ndim >= 2 on both operands")
    out_data = a.data @ b.data

    def backward(g: Array) -> None:
        if a.requires_grad:
            ga = g @ b.data.swapaxes(-1, -2)
            a._accumulate(_unbroadcast(ga, a.shape))
        if b.requires_grad:
            gb = a.data.swapaxes(-1, -2) @ g
            b._accumulate(_unbroadcast(gb, b.shape))

    return _make(out_data, (a, b), backward)


def exp(a) -> Tensor:
    a = _ensure(a)
    out_data = np.exp(a.data)

    def backward(g: Array) -> None:
        if a.requires_grad:
            a._accumulate(g * out_data)

    return _make(out_data, (a,), backward)


def log(a) -> Tensor:
    a = _ensure(a)
    out_data = np.log(a.data)

    def backward(g: Array) -> None:
        if a.requires_grad:
            a._accumulate(g / a.data)

    return _make(out_data, (a,), backward)


def sqrt(a) -> Tensor:
    a = _ensure(a)
    out_data = np.sqrt(a.data)

    def backward(g: Array) -> None:
        if a.requires_grad:
            a._accumulate(g * 0.5 / out_data)

    return _make(out_data, (a,), backward)


def tanh(a) -> Tensor:
    a = _ensure(a)
    out_data = np.tanh(a.data)

    def backward(g: Array) -> None:
        if a.requires_grad:
            a._accumulate(g * (1.0 - out_data * out_data))

    return _make(out_data, (a,), backward)


def sigmoid(a) -> Tensor:
    a = _ensure(a)
    x = a.data
    e = np.exp(-np.abs(x))
    out_data = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))

    def backward(g: Array) -> None:
        if a.requires_grad:
            a._accumulate(g * out_data * (1.0 - out_data))

    return _make(out_data, (a,), backward)


def log_sigmoid(a) -> Tensor:
    """log(sigmoid(x)), stable for large negative x (returns ~x, not -inf)."""
    a = _ensure(a)
    x = a.data
    e = np.exp(-np.abs(x))
    stable = -np.log1p(e)
    out_data = np.where(x >= 0, stable, x + stable)

    def backward(g: Array) -> None:
        if a.requires_grad:
            # d/dx log sigmoid(x) = sigmoid(-x)
            sig_neg = np.where(x >= 0, e / (1.0 + e), 1.0 / (1.0 + e))
            a._accumulate(g * sig_neg)

    return _make(out_data, (a,), backward)


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _ensure(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g: Array) -> None:
        if not a.requires_grad:
            return
        if axis is None:
            a._accumulate(np.broadcast_to(g, a.shape).copy())
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g, a.shape).copy())

    return _make(out_data, (a,), backward)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _ensure(a)
    if axis is None:
        count = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = 1
        for ax in axes:
            count *= a.shape[ax]
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(a, shape: tuple[int, ...]) -> Tensor:
    a = _ensure(a)
    out_data = a.data.reshape(shape)

    def backward(g: Array) -> None:
        if a.requires_grad:
            a._accumulate(g.reshape(a.shape))

    return _make(out_data, (a,), backward)


def transpose(a, axes: tuple[int, ...]) -> Tensor:
    a = _ensure(a)
    out_data = a.data.transpose(axes)
    inverse = tuple(np.argsort(axes))

    def backward(g: Array) -> None:
        if a.requires_grad:
            a._accumulate(g.transpose(inverse))

    return _make(out_data, (a,), backward)


def getitem(a, key) -> Tensor:
    a = _ensure(a)
    out_data = a.data[key]

    def backward(g: Array) -> None:
        if a.requires_grad:
            scat = np.zeros_like(a.data)
            np.add.at(scat, key, g)
            a._accumulate(scat)

    return _make(out_data, (a,), backward)


def take_along_axis(a, indices: Array, axis: int) -> Tensor:
    """Gather along an axis; gradient scatters back to the gathered slots.

    Indices must be unique along ``axis`` per position (true for order
    statistics selection, the only caller), so a plain put is an add.
    """
    a = _ensure(a)
    out_data = np.take_along_axis(a.data, indices, axis=axis)

    def backward(g: Array) -> None:
        if not a.requires_grad:
            return
        scat = np.zeros_like(a.data)
        np.put_along_axis(scat, indices, g, axis=axis)
        a._accumulate(scat)

    return _make(out_data, (a,), backward)


def concat(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    ts = [_ensure(t) for t in tensors]
    out_data = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.shape[axis] for t in ts]
    offsets = np.cumsum([0] + sizes)

    def backward(g: Array) -> None:
        for t, lo, hi in zip(ts, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                t._accumulate(g[tuple(sl)])

    return _make(out_data, ts, backward)


# -- composite helpers -----------------------------------------------------


def softmax(a, axis: int = -1) -> Tensor:
    """Numerically stable softmax; the row-max shift is a constant and does
    not alter the gradient (softmax is shift invariant per row)."""
    a = _ensure(a)
    shift = Tensor(a.data.max(axis=axis, keepdims=True))
    e = exp(a - shift)
    return e / sum_(e, axis=axis, keepdims=True)


def logsumexp(a, axis: int = -1, keepdims: bool = False) -> Tensor:
    a = _ensure(a)
    shift = a.data.max(axis=axis, keepdims=True)
    out = log(sum_(exp(a - Tensor(shift)), axis=axis, keepdims=True)) + Tensor(shift)
    if not keepdims:
        out = reshape(out, tuple(s for i, s in enumerate(out.shape) if i != (axis % out.ndim)))
    return out
