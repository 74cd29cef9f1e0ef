"""Minimal tape-based reverse-mode automatic differentiation over numpy.

All values are float64 ndarrays. A `Tensor` wraps an array plus an optional
backward closure; calling `backward()` on a scalar loss walks the recorded
graph in reverse topological order and accumulates gradients into every
tensor with `requires_grad`. Ops skip graph construction entirely when no
input requires a gradient, so the same forward code serves training and
inference.
"""

from __future__ import annotations

import math

import numpy as np

_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """A node in the computation graph wrapping a float64 array."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def _accum(self, grad: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += _unbroadcast(grad, self.data.shape)

    # -- graph construction -------------------------------------------------

    @staticmethod
    def _op(data: np.ndarray, parents: tuple["Tensor", ...], backward) -> "Tensor":
        out = Tensor(data)
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._backward = backward
        return out

    # -- arithmetic ----------------------------------------------------------

    def __add__(self, other):
        if isinstance(other, Tensor):
            def bw(g, a=self, b=other):
                if a.requires_grad:
                    a._accum(g)
                if b.requires_grad:
                    b._accum(g)
            return Tensor._op(self.data + other.data, (self, other), bw)
        const = np.asarray(other, dtype=np.float64)

        def bw(g, a=self):
            a._accum(g)
        return Tensor._op(self.data + const, (self,), bw)

    __radd__ = __add__

    def __neg__(self):
        def bw(g, a=self):
            a._accum(-g)
        return Tensor._op(-self.data, (self,), bw)

    def __sub__(self, other):
        if isinstance(other, Tensor):
            def bw(g, a=self, b=other):
                if a.requires_grad:
                    a._accum(g)
                if b.requires_grad:
                    b._accum(-g)
            return Tensor._op(self.data - other.data, (self, other), bw)
        return self + (-np.asarray(other, dtype=np.float64))

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        if isinstance(other, Tensor):
            def bw(g, a=self, b=other):
                if a.requires_grad:
                    a._accum(g * b.data)
                if b.requires_grad:
                    b._accum(g * a.data)
            return Tensor._op(self.data * other.data, (self, other), bw)
        const = np.asarray(other, dtype=np.float64)

        def bw(g, a=self):
            a._accum(g * const)
        return Tensor._op(self.data * const, (self,), bw)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            def bw(g, a=self, b=other):
                if a.requires_grad:
                    a._accum(g / b.data)
                if b.requires_grad:
                    b._accum(-g * a.data / (b.data * b.data))
            return Tensor._op(self.data / other.data, (self, other), bw)
        return self * (1.0 / np.asarray(other, dtype=np.float64))

    def __pow__(self, exponent: float):
        e = float(exponent)

        def bw(g, a=self):
            a._accum(g * e * a.data ** (e - 1.0))
        return Tensor._op(self.data ** e, (self,), bw)

    def __matmul__(self, other: "Tensor"):
        def bw(g, a=self, b=other):
            if a.requires_grad:
                a._accum(g @ b.data.swapaxes(-1, -2))
            if b.requires_grad:
                b._accum(a.data.swapaxes(-1, -2) @ g)
        return Tensor._op(self.data @ other.data, (self, other), bw)

    # -- shape ops -----------------------------------------------------------

    @property
    def T(self) -> "Tensor":
        def bw(g, a=self):
            a._accum(g.swapaxes(-1, -2))
        return Tensor._op(self.data.swapaxes(-1, -2), (self,), bw)

    def reshape(self, *shape) -> "Tensor":
        old = self.data.shape

        def bw(g, a=self):
            a._accum(g.reshape(old))
        return Tensor._op(self.data.reshape(*shape), (self,), bw)

    def __getitem__(self, idx) -> "Tensor":
        def bw(g, a=self):
            full = np.zeros_like(a.data)
            np.add.at(full, idx, g)
            a._accum(full)
        return Tensor._op(self.data[idx], (self,), bw)

    # -- reductions ----------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        def bw(g, a=self):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            a._accum(np.broadcast_to(g, a.data.shape))
        return Tensor._op(self.data.sum(axis=axis, keepdims=keepdims), (self,), bw)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        count = self.data.size if axis is None else self.data.shape[axis]

        def bw(g, a=self):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            a._accum(np.broadcast_to(g, a.data.shape) / count)
        return Tensor._op(self.data.mean(axis=axis, keepdims=keepdims), (self,), bw)

    # -- nonlinearities -------------------------------------------------------

    def exp(self) -> "Tensor":
        out_data = np.exp(self.data)

        def bw(g, a=self):
            a._accum(g * out_data)
        return Tensor._op(out_data, (self,), bw)

    def log(self) -> "Tensor":
        def bw(g, a=self):
            a._accum(g / a.data)
        return Tensor._op(np.log(self.data), (self,), bw)

    def gelu(self) -> "Tensor":
        x = self.data
        inner = _GELU_C * (x + _GELU_A * x ** 3)
        t = np.tanh(inner)
        out_data = 0.5 * x * (1.0 + t)

        def bw(g, a=self):
            d_inner = _GELU_C * (1.0 + 3.0 * _GELU_A * x ** 2)
            local = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t ** 2) * d_inner
            a._accum(g * local)
        return Tensor._op(out_data, (self,), bw)

    def softmax(self, axis: int = -1) -> "Tensor":
        z = self.data - self.data.max(axis=axis, keepdims=True)
        e = np.exp(z)
        y = e / e.sum(axis=axis, keepdims=True)

        def bw(g, a=self):
            a._accum((g - (g * y).sum(axis=axis, keepdims=True)) * y)
        return Tensor._op(y, (self,), bw)

    def log_softmax(self, axis: int = -1) -> "Tensor":
        z = self.data - self.data.max(axis=axis, keepdims=True)
        lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
        out_data = z - lse
        y = np.exp(out_data)

        def bw(g, a=self):
            a._accum(g - y * g.sum(axis=axis, keepdims=True))
        return Tensor._op(out_data, (self,), bw)

    # -- backward pass ---------------------------------------------------------

    def backward(self) -> None:
        """Reverse-mode gradient of this scalar w.r.t. every requires_grad input.

        Grads held by nodes of this graph are reset first, so repeated calls
        produce identical results.
        """
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar tensor")
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))
        for node in topo:
            node.grad = None
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


def concat(tensors: list[Tensor], axis: int = 0) -> Tensor:
    """Concatenate tensors along `axis`, routing gradients to each slice."""
    parts = tuple(tensors)
    sizes = [t.data.shape[axis] for t in parts]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        for t, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                index = [slice(None)] * g.ndim
                index[axis] = slice(lo, hi)
                t._accum(g[tuple(index)])
    return Tensor._op(np.concatenate([t.data for t in parts], axis=axis), parts, bw)


def stack_rows(rows: list[Tensor]) -> Tensor:
    """Stack 1-D tensors of equal width into a (len(rows), width) tensor."""
    return concat([r.reshape(1, -1) for r in rows], axis=0)
