"""Reverse-mode automatic differentiation over numpy arrays.

A :class:`Tensor` wraps a row-major ``numpy.ndarray``.  Every operation on
tensors that require gradients records its parents and a closure mapping the
output gradient to one gradient per parent.  :meth:`Tensor.backward` walks the
recorded graph in reverse topological order and accumulates gradients
additively, so a tensor used twice receives the sum of both path gradients.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference, optimizer updates)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (reverses numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


class Tensor:
    """N-dimensional array node in a reverse-mode differentiation graph."""

    __array_priority__ = 1000
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.name = name

    # ------------------------------------------------------------------ basics
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
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return self.data.shape[0]

    # ------------------------------------------------------------ graph glue
    @staticmethod
    def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        out.name = None
        if _GRAD_ENABLED and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

    def _const(self, other) -> Tensor:
        if isinstance(other, Tensor):
            return other
        return Tensor(np.asarray(other, dtype=self.data.dtype))

    def backward(self) -> None:
        """Populate ``.grad`` of every leaf tensor reachable from this scalar."""
        if self.data.size != 1:
            raise ValueError(f"backward() needs a scalar root, got shape {self.shape}")
        if not self.requires_grad:
            raise RuntimeError("root does not require grad; nothing to differentiate")

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for p, pg in zip(node._parents, node._backward(g)):
                if pg is None or not p.requires_grad:
                    continue
                k = id(p)
                grads[k] = pg if k not in grads else grads[k] + pg

    # ------------------------------------------------------------ arithmetic
    def __add__(self, other) -> Tensor:
        other = self._const(other)
        a, b = self.shape, other.shape
        return Tensor._make(self.data + other.data, (self, other),
                            lambda g: (_unbroadcast(g, a), _unbroadcast(g, b)))

    __radd__ = __add__

    def __neg__(self) -> Tensor:
        return Tensor._make(-self.data, (self,), lambda g: (-g,))

    def __sub__(self, other) -> Tensor:
        other = self._const(other)
        a, b = self.shape, other.shape
        return Tensor._make(self.data - other.data, (self, other),
                            lambda g: (_unbroadcast(g, a), _unbroadcast(-g, b)))

    def __rsub__(self, other) -> Tensor:
        return self._const(other) - self

    def __mul__(self, other) -> Tensor:
        other = self._const(other)
        x, y = self.data, other.data

        def bw(g):
            return (_unbroadcast(g * y, x.shape) if self.requires_grad else None,
                    _unbroadcast(g * x, y.shape) if other.requires_grad else None)

        return Tensor._make(x * y, (self, other), bw)

    __rmul__ = __mul__

    def __truediv__(self, other) -> Tensor:
        other = self._const(other)
        x, y = self.data, other.data

        def bw(g):
            return (_unbroadcast(g / y, x.shape) if self.requires_grad else None,
                    _unbroadcast(-g * x / (y * y), y.shape) if other.requires_grad else None)

        return Tensor._make(x / y, (self, other), bw)

    def __rtruediv__(self, other) -> Tensor:
        return self._const(other) / self

    def __pow__(self, p: float) -> Tensor:
        x = self.data
        return Tensor._make(x ** p, (self,), lambda g: (g * p * x ** (p - 1),))

    def __matmul__(self, other) -> Tensor:
        other = self._const(other)
        x, y = self.data, other.data
        if x.ndim < 2 or y.ndim < 2:
            raise ValueError(f"matmul needs >=2-D operands, got {x.shape} @ {y.shape}")

        def bw(g):
            gx = gy = None
            if self.requires_grad:
                gx = _unbroadcast(g @ np.swapaxes(y, -1, -2), x.shape)
            if other.requires_grad:
                gy = _unbroadcast(np.swapaxes(x, -1, -2) @ g, y.shape)
            return gx, gy

        return Tensor._make(x @ y, (self, other), bw)

    # ----------------------------------------------------------- reductions
    def sum(self, axis=None, keepdims: bool = False) -> Tensor:
        shape = self.shape

        def bw(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return Tensor._make(np.asarray(self.data.sum(axis=axis, keepdims=keepdims)), (self,), bw)

    def mean(self, axis=None, keepdims: bool = False) -> Tensor:
        if axis is None:
            n = self.data.size
        else:
            axes = (axis,) if isinstance(axis, int) else axis
            n = int(np.prod([self.shape[a] for a in axes]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    # -------------------------------------------------------------- shaping
    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.shape
        return Tensor._make(self.data.reshape(shape), (self,), lambda g: (g.reshape(old),))

    def transpose(self, *axes) -> Tensor:
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        inv = tuple(np.argsort(axes))
        return Tensor._make(self.data.transpose(axes), (self,), lambda g: (g.transpose(inv),))

    def swapaxes(self, a: int, b: int) -> Tensor:
        return Tensor._make(np.swapaxes(self.data, a, b), (self,),
                            lambda g: (np.swapaxes(g, a, b),))

    def broadcast_to(self, shape) -> Tensor:
        old = self.shape
        return Tensor._make(np.broadcast_to(self.data, shape), (self,),
                            lambda g: (_unbroadcast(g, old),))

    def __getitem__(self, idx) -> Tensor:
        if isinstance(idx, Tensor):
            idx = idx.data.astype(np.intp)
        shape, dt = self.shape, self.dtype
        basic = _is_basic_index(idx)

        def bw(g):
            full = np.zeros(shape, dtype=dt)
            if basic:
                full[idx] = g
            else:
                np.add.at(full, idx, g)
            return (full,)

        return Tensor._make(self.data[idx], (self,), bw)

    # ---------------------------------------------------------- elementwise
    def exp(self) -> Tensor:
        y = np.exp(self.data)
        return Tensor._make(y, (self,), lambda g: (g * y,))

    def log(self) -> Tensor:
        x = self.data
        return Tensor._make(np.log(x), (self,), lambda g: (g / x,))

    def sqrt(self) -> Tensor:
        y = np.sqrt(self.data)
        return Tensor._make(y, (self,), lambda g: (g * 0.5 / y,))

    def tanh(self) -> Tensor:
        y = np.tanh(self.data)
        return Tensor._make(y, (self,), lambda g: (g * (1 - y * y),))

    def sigmoid(self) -> Tensor:
        y = _sigmoid(self.data)
        return Tensor._make(y, (self,), lambda g: (g * y * (1 - y),))

    def relu(self) -> Tensor:
        x = self.data
        return Tensor._make(np.maximum(x, 0), (self,), lambda g: (g * (x > 0),))

    def softplus(self) -> Tensor:
        """log(1 + exp(x)), stable for large |x|."""
        x = self.data
        y = np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))
        return Tensor._make(y, (self,), lambda g: (g * _sigmoid(x),))

    def gelu(self) -> Tensor:
        # tanh approximation
        x = self.data
        c = x.dtype.type(0.7978845608028654)
        inner = c * (x + 0.044715 * x ** 3)
        t = np.tanh(inner)
        y = 0.5 * x * (1 + t)

        def bw(g):
            dinner = c * (1 + 3 * 0.044715 * x * x)
            return (g * (0.5 * (1 + t) + 0.5 * x * (1 - t * t) * dinner),)

        return Tensor._make(y, (self,), bw)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in items)


# ------------------------------------------------------------- free functions
def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def concat(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor._make(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw)


def stack(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)

    def bw(g):
        return tuple(np.moveaxis(g, axis, 0))

    return Tensor._make(np.stack([t.data for t in tensors], axis=axis), tensors, bw)


def split(x: Tensor, sections: int, axis: int = -1) -> list[Tensor]:
    n = x.shape[axis] // sections
    out = []
    for k in range(sections):
        sl = [slice(None)] * x.ndim
        sl[axis] = slice(k * n, (k + 1) * n)
        out.append(x[tuple(sl)])
    return out


def roll(x: Tensor, shift, axis) -> Tensor:
    neg = tuple(-s for s in shift) if isinstance(shift, tuple) else -shift
    return Tensor._make(np.roll(x.data, shift, axis=axis), (x,),
                        lambda g: (np.roll(g, neg, axis=axis),))
