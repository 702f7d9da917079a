"""Dense real tensors with a reverse-mode gradient engine.

A :class:`Tensor` wraps a numpy array (float32 by default, float64 allowed for
gradient checking) and records the operation that produced it.  Calling
:meth:`Tensor.backward` on a scalar walks the recorded graph in reverse
topological order and accumulates ``.grad`` on every leaf that requires it.
The graph is released once the backward pass finishes.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32
_FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))

# per-thread so inference workers can enter no_grad() independently
_state = threading.local()
check_finite = True


class ContractViolation(ValueError):
    """Raised when an operation's preconditions are not met."""


class NonFiniteError(ContractViolation):
    """Raised when NaN or Inf shows up at an operation boundary."""


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference mode)."""
    prev = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


def _as_array(data, dtype=None) -> np.ndarray:
    if isinstance(data, Tensor):
        data = data.data
    if dtype is not None:
        return np.asarray(data).astype(dtype, copy=False)
    # lists and Python scalars default to float32; float arrays keep their dtype
    arr = np.asarray(data)
    if isinstance(data, (np.ndarray, np.generic)) and arr.dtype in _FLOAT_DTYPES:
        return arr
    return arr.astype(DEFAULT_DTYPE)


def _check(arr: np.ndarray, op: str) -> None:
    # a NaN or Inf anywhere makes the sum non-finite, and one reduction is far
    # cheaper than materialising an isfinite mask
    if check_finite and not np.isfinite(np.add.reduce(arr, axis=None)):
        raise NonFiniteError(f"non-finite values produced by '{op}'")


class Tensor:
    """N-dimensional real array with optional gradient tracking."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward", "_op")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None, dtype=None):
        arr = _as_array(data, dtype)
        if arr.ndim and min(arr.shape) < 1:
            raise ContractViolation(f"tensor extents must be >= 1, got {arr.shape}")
        _check(arr, "construct")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self._op = "leaf"

    # -- construction helpers -------------------------------------------------

    @classmethod
    def _from_op(cls, data: np.ndarray, parents: Sequence["Tensor"], backward, op: str) -> "Tensor":
        _check(data, op)
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.name = None
        out._op = op
        needs = is_grad_enabled() and any(p.requires_grad for p in parents)
        out.requires_grad = needs
        if needs:
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    @staticmethod
    def zeros(shape, requires_grad=False, dtype=DEFAULT_DTYPE) -> "Tensor":
        return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)

    # -- basic properties -----------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad}{tag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- autograd -------------------------------------------------------------

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        """Populate ``.grad`` of every reachable leaf with ``requires_grad``."""
        if grad is None:
            if self.data.size != 1:
                raise ContractViolation(f"backward() needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        if not self.requires_grad:
            return
        order = topological_order(self)
        grads = {id(self): np.asarray(grad, dtype=self.dtype)}
        owned = set()
        for node in reversed(order):
            g = grads.pop(id(node), None)
            owned.discard(id(node))
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                _accumulate(grads, owned, id(parent), parent, pg)
        for node in order:
            if node._backward is not None:
                node._parents = ()
                node._backward = None

    # -- operator sugar -------------------------------------------------------

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
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division is not supported")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return mul(self, -1.0)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self):
        return tmean(self)


class SliceGrad:
    """Gradient that is zero except on ``full[index]``; lets slicing ops avoid
    materialising a full-size array per slice."""

    __slots__ = ("index", "value")

    def __init__(self, index, value):
        self.index = index
        self.value = value


def _accumulate(grads: dict, owned: set, key: int, parent: "Tensor", pg) -> None:
    cur = grads.get(key)
    if isinstance(pg, SliceGrad):
        if cur is None:
            cur = np.zeros(parent.shape, dtype=parent.dtype)
            owned.add(key)
        elif key not in owned:
            cur = cur.copy()
            owned.add(key)
        cur[pg.index] += pg.value
        grads[key] = cur
    elif cur is None:
        grads[key] = pg
    elif key in owned:
        cur += pg
    else:
        grads[key] = cur + pg
        owned.add(key)


def topological_order(root: Tensor) -> list:
    """Nodes reachable from ``root`` with parents before children.

    Each node appears exactly once; the recorded graph is acyclic by
    construction since outputs are always created after their inputs.
    """
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
        for p in node._parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _scalar_or_tensor(x, like: Tensor):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


# -- elementwise arithmetic ---------------------------------------------------


def add(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _scalar_or_tensor(a, b)
    b = b if isinstance(b, Tensor) else _scalar_or_tensor(b, a)
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return Tensor._from_op(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _scalar_or_tensor(a, b)
    b = b if isinstance(b, Tensor) else _scalar_or_tensor(b, a)
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return Tensor._from_op(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    if not isinstance(b, Tensor) and np.ndim(b) == 0:
        # scalar fast path, no graph edge for the constant
        c = np.asarray(b, dtype=a.dtype)
        return Tensor._from_op(a.data * c, (a,), lambda g: (g * c,), "scale")
    if not isinstance(a, Tensor) and np.ndim(a) == 0:
        return mul(b, a)
    a = a if isinstance(a, Tensor) else _scalar_or_tensor(a, b)
    b = b if isinstance(b, Tensor) else _scalar_or_tensor(b, a)
    ad, bd = a.data, b.data

    def backward(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._from_op(ad * bd, (a, b), backward, "mul")


def square(a: Tensor) -> Tensor:
    ad = a.data
    return Tensor._from_op(ad * ad, (a,), lambda g: (2.0 * g * ad,), "square")


def relu(a: Tensor) -> Tensor:
    pos = a.data > 0
    return Tensor._from_op(np.where(pos, a.data, 0).astype(a.dtype), (a,), lambda g: (g * pos,), "relu")


def sigmoid(a: Tensor) -> Tensor:
    # tanh form never overflows
    out = (0.5 + 0.5 * np.tanh(0.5 * a.data)).astype(a.dtype, copy=False)
    return Tensor._from_op(out, (a,), lambda g: (g * out * (1 - out),), "sigmoid")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return Tensor._from_op(out, (a,), lambda g: (g * (1 - out * out),), "tanh")


# -- reductions ---------------------------------------------------------------


def tsum(a: Tensor, axis=None) -> Tensor:
    shape = a.shape
    out = a.data.sum(axis=axis, dtype=np.float64).astype(a.dtype)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, shape).astype(a.dtype),)
        axes = (axis,) if np.ndim(axis) == 0 else tuple(axis)
        axes = tuple(ax % len(shape) for ax in axes)
        gexp = np.expand_dims(g, axes)
        return (np.broadcast_to(gexp, shape).astype(a.dtype),)

    return Tensor._from_op(np.asarray(out), (a,), backward, "sum")


def tmean(a: Tensor) -> Tensor:
    n = a.data.size
    out = np.asarray(a.data.mean(dtype=np.float64), dtype=a.dtype)
    return Tensor._from_op(out, (a,), lambda g: (np.full(a.shape, g / n, dtype=a.dtype),), "mean")


def mse(pred: Tensor, target) -> Tensor:
    """Mean of squared differences; ``target`` is treated as a constant."""
    t = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=pred.dtype)
    if pred.shape != t.shape:
        raise ContractViolation(f"mse shape mismatch: {pred.shape} vs {t.shape}")
    diff = pred.data - t
    n = diff.size
    out = np.asarray(np.mean(np.square(diff, dtype=np.float64)), dtype=pred.dtype)
    scale = 2.0 / n
    return Tensor._from_op(out, (pred,), lambda g: ((g * scale) * diff,), "mse")


# -- shape manipulation -------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    orig = a.shape
    return Tensor._from_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(orig),), "reshape")


def transpose(a: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)
    out = np.ascontiguousarray(a.data.transpose(axes))
    return Tensor._from_op(out, (a,), lambda g: (np.ascontiguousarray(g.transpose(inv)),), "transpose")


def getitem(a: Tensor, index) -> Tensor:
    shape, dtype = a.shape, a.dtype

    def backward(g):
        if _has_advanced(index):
            full = np.zeros(shape, dtype=dtype)
            np.add.at(full, index, g)
            return (full,)
        return (SliceGrad(index, g),)

    return Tensor._from_op(np.ascontiguousarray(a.data[index]), (a,), backward, "getitem")


def _has_advanced(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)
    out = np.concatenate([t.data for t in tensors], axis=axis)

    def backward(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(tensors))
        )

    return Tensor._from_op(out, tensors, backward, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    out = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return Tensor._from_op(out, tensors, backward, "stack")


def parameters_with_grad(params: Iterable[Tensor]) -> list:
    return [p for p in params if p.requires_grad]
