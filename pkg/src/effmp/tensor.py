"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Every op builds a node holding its parents and a closure that maps the output
gradient to parent gradients. ``Tensor.backward`` walks the graph in reverse
topological order. Elementwise ops only broadcast over *leading* dimensions
(one operand's shape must be a suffix of the other's, or a scalar); anything
else raises :class:`ShapeError`.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "DomainError",
    "tensor",
    "param",
    "concat",
    "no_grad",
    "topo_order",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class DomainError(ValueError):
    """Input outside the mathematical domain of the op."""


_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    prev = _grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


def _as_array(value) -> np.ndarray:
    return np.asarray(value, dtype=np.float64)


def _leading_broadcast(a: tuple, b: tuple) -> tuple:
    if a == b:
        return a
    if len(a) == 0:
        return b
    if len(b) == 0:
        return a
    if len(a) >= len(b) and a[len(a) - len(b):] == b:
        return a
    if len(b) > len(a) and b[len(b) - len(a):] == a:
        return b
    raise ShapeError(f"cannot broadcast shapes {a} and {b} (only leading dims broadcast)")


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    if len(shape) == 0:
        return np.asarray(grad.sum())
    lead = grad.ndim - len(shape)
    return grad.sum(axis=tuple(range(lead)))


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = _as_array(data)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.op = "leaf"
        self.name = name

    # -- construction helpers ---------------------------------------------
    @staticmethod
    def _make(data: np.ndarray, parents: tuple["Tensor", ...], backward, op: str) -> "Tensor":
        out = Tensor(data)
        if _grad_enabled() and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._backward = backward
            out.op = op
        return out

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # -- elementwise binary ------------------------------------------------
    def __add__(self, other):
        other = _wrap(other)
        _leading_broadcast(self.shape, other.shape)
        sa, sb = self.shape, other.shape
        return Tensor._make(
            self.data + other.data,
            (self, other),
            lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)),
            "add",
        )

    __radd__ = __add__

    def __sub__(self, other):
        other = _wrap(other)
        _leading_broadcast(self.shape, other.shape)
        sa, sb = self.shape, other.shape
        return Tensor._make(
            self.data - other.data,
            (self, other),
            lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)),
            "sub",
        )

    def __rsub__(self, other):
        return _wrap(other) - self

    def __neg__(self):
        return Tensor._make(-self.data, (self,), lambda g: (-g,), "neg")

    def __mul__(self, other):
        other = _wrap(other)
        _leading_broadcast(self.shape, other.shape)
        a, b = self.data, other.data
        return Tensor._make(
            a * b,
            (self, other),
            lambda g: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)),
            "mul",
        )

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = _wrap(other)
        _leading_broadcast(self.shape, other.shape)
        a, b = self.data, other.data
        return Tensor._make(
            a / b,
            (self, other),
            lambda g: (_unbroadcast(g / b, a.shape), _unbroadcast(-g * a / (b * b), b.shape)),
            "div",
        )

    def __rtruediv__(self, other):
        return _wrap(other) / self

    # -- linear algebra ----------------------------------------------------
    def __matmul__(self, other):
        return matmul(self, other)

    def transpose(self, axes: Sequence[int] | None = None) -> "Tensor":
        if axes is None:
            axes = tuple(range(self.ndim))[::-1]
        axes = tuple(int(a) % max(self.ndim, 1) for a in axes)
        inv = tuple(np.argsort(axes))
        return Tensor._make(
            np.transpose(self.data, axes), (self,), lambda g: (np.transpose(g, inv),), "transpose"
        )

    @property
    def T(self) -> "Tensor":
        return self.transpose()

    def swapaxes(self, a1: int, a2: int) -> "Tensor":
        axes = list(range(self.ndim))
        axes[a1], axes[a2] = axes[a2], axes[a1]
        return self.transpose(axes)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        src = self.shape
        return Tensor._make(
            self.data.reshape(shape), (self,), lambda g: (g.reshape(src),), "reshape"
        )

    def __getitem__(self, index) -> "Tensor":
        src = self.shape
        out = self.data[index]

        def back(g):
            full = np.zeros(src)
            np.add.at(full, index, g)
            return (full,)

        return Tensor._make(np.array(out, dtype=np.float64), (self,), back, "slice")

    # -- reductions --------------------------------------------------------
    def sum(self, axis: int | tuple | None = None, keepdims: bool = False) -> "Tensor":
        src = self.shape
        out = self.data.sum(axis=axis, keepdims=keepdims)

        def back(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, src).copy(),)

        return Tensor._make(np.asarray(out), (self,), back, "sum")

    def mean(self, axis: int | tuple | None = None, keepdims: bool = False) -> "Tensor":
        if axis is None:
            count = self.size
        else:
            axes = axis if isinstance(axis, tuple) else (axis,)
            count = int(np.prod([self.shape[a] for a in axes]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    def max(self, axis: int | None = None, keepdims: bool = False) -> "Tensor":
        """Max reduction. Gradient flows to the first maximal entry only."""
        x = self.data
        if axis is None:
            flat = int(np.argmax(x))
            out = x.reshape(-1)[flat]

            def back(g):
                full = np.zeros(x.size)
                full[flat] = g
                return (full.reshape(x.shape),)

            return Tensor._make(np.asarray(out), (self,), back, "max")
        ax = axis % x.ndim
        idx = np.expand_dims(np.argmax(x, axis=ax), ax)
        out = np.take_along_axis(x, idx, axis=ax)

        def back(g):
            if not keepdims:
                g = np.expand_dims(g, ax)
            full = np.zeros(x.shape)
            np.put_along_axis(full, idx, g, axis=ax)
            return (full,)

        return Tensor._make(out if keepdims else np.squeeze(out, ax), (self,), back, "max")

    def cumsum(self, axis: int) -> "Tensor":
        ax = axis % self.ndim

        def back(g):
            return (np.flip(np.cumsum(np.flip(g, ax), axis=ax), ax),)

        return Tensor._make(np.cumsum(self.data, axis=ax), (self,), back, "cumsum")

    # -- unary -------------------------------------------------------------
    def exp(self) -> "Tensor":
        out = np.exp(self.data)
        return Tensor._make(out, (self,), lambda g: (g * out,), "exp")

    def log(self) -> "Tensor":
        x = self.data
        if np.any(x <= 0):
            raise DomainError("log of non-positive value")
        return Tensor._make(np.log(x), (self,), lambda g: (g / x,), "log")

    def tanh(self) -> "Tensor":
        out = np.tanh(self.data)
        return Tensor._make(out, (self,), lambda g: (g * (1.0 - out * out),), "tanh")

    def sigmoid(self) -> "Tensor":
        x = self.data
        out = np.empty_like(x)
        pos = x >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        out[~pos] = ex / (1.0 + ex)
        return Tensor._make(out, (self,), lambda g: (g * out * (1.0 - out),), "sigmoid")

    def sqrt(self) -> "Tensor":
        x = self.data
        if np.any(x < 0):
            raise DomainError("sqrt of negative value")
        out = np.sqrt(x)

        def back(g):
            # subgradient 0 at the origin keeps exact-zero distances finite
            safe = np.where(out > 0, out, 1.0)
            return (np.where(out > 0, g / (2.0 * safe), 0.0),)

        return Tensor._make(out, (self,), back, "sqrt")

    def relu(self) -> "Tensor":
        x = self.data
        return Tensor._make(np.maximum(x, 0.0), (self,), lambda g: (g * (x > 0),), "relu")

    def softmax(self, axis: int = -1) -> "Tensor":
        x = self.data
        shifted = x - x.max(axis=axis, keepdims=True)
        e = np.exp(shifted)
        out = e / e.sum(axis=axis, keepdims=True)

        def back(g):
            return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

        return Tensor._make(out, (self,), back, "softmax")

    def logsumexp(self, axis: int = -1, keepdims: bool = False) -> "Tensor":
        x = self.data
        m = x.max(axis=axis, keepdims=True)
        s = np.exp(x - m).sum(axis=axis, keepdims=True)
        out_k = m + np.log(s)
        weights = np.exp(x - out_k)

        def back(g):
            if not keepdims:
                g = np.expand_dims(g, axis)
            return (g * weights,)

        out = out_k if keepdims else np.squeeze(out_k, axis=axis)
        return Tensor._make(out, (self,), back, "logsumexp")

    def log_softmax(self, axis: int = -1) -> "Tensor":
        return self - _expand_last(self.logsumexp(axis=axis, keepdims=True), self.shape)

    # -- autodiff ----------------------------------------------------------
    def backward(self, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if self.size != 1:
                raise ShapeError(f"backward() needs a scalar loss, got shape {self.shape}")
            grad = np.ones(self.shape)
        grads: dict[int, np.ndarray] = {id(self): _as_array(grad)}
        for node in reversed(topo_order(self)):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def _expand_last(t: Tensor, shape: tuple) -> Tensor:
    # broadcast a keepdims reduction back along its size-1 axis
    src = t.shape
    out = np.broadcast_to(t.data, shape).copy()
    axes = tuple(i for i, (a, b) in enumerate(zip(src, shape)) if a == 1 and b != 1)
    return Tensor._make(out, (t,), lambda g: (g.sum(axis=axes, keepdims=True),), "expand")


def _wrap(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def tensor(value, requires_grad: bool = False) -> Tensor:
    return Tensor(value, requires_grad=requires_grad)


def param(value, name: str | None = None) -> Tensor:
    return Tensor(value, requires_grad=True, name=name)


def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.ndim == 0 or b.ndim == 0:
        raise ShapeError("matmul needs at least 1-d operands")
    av = a.data[None, :] if a.ndim == 1 else a.data
    bv = b.data[:, None] if b.ndim == 1 else b.data
    if av.shape[-1] != bv.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    _leading_broadcast(av.shape[:-2], bv.shape[:-2])
    out = av @ bv
    if a.ndim == 1:
        out = out[..., 0, :]
    if b.ndim == 1:
        out = out[..., 0]

    def back(g):
        gv = g
        if a.ndim == 1:
            gv = np.expand_dims(gv, -2)
        if b.ndim == 1:
            gv = np.expand_dims(gv, -1)
        ga = gv @ np.swapaxes(bv, -1, -2)
        gb = np.swapaxes(av, -1, -2) @ gv
        ga = _unbroadcast(ga, av.shape).reshape(a.shape)
        gb = _unbroadcast(gb, bv.shape).reshape(b.shape)
        return ga, gb

    return Tensor._make(out, (a, b), back, "matmul")


def concat(tensors: Iterable[Tensor], axis: int = -1) -> Tensor:
    ts = [_wrap(t) for t in tensors]
    if not ts:
        raise ShapeError("concat of nothing")
    ndim = ts[0].ndim
    ax = axis % ndim
    for t in ts[1:]:
        if t.ndim != ndim or t.shape[:ax] + t.shape[ax + 1:] != ts[0].shape[:ax] + ts[0].shape[ax + 1:]:
            raise ShapeError(f"concat shape mismatch: {[t.shape for t in ts]}")
    sizes = np.cumsum([t.shape[ax] for t in ts])[:-1]

    def back(g):
        return tuple(np.split(g, sizes, axis=ax))

    return Tensor._make(np.concatenate([t.data for t in ts], axis=ax), tuple(ts), back, "concat")


def topo_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root``, every node after all of its inputs."""
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
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order
