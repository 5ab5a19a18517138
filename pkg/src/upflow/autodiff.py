"""Tape-based reverse-mode differentiation on float64 numpy arrays.

Only the handful of operations the displacement network needs are provided.
Backward rules are exact; the masked max routes its gradient to the argmax
entry, with ties resolved toward the lowest index. All reductions use
numpy's fixed left-to-right accumulation, so results are reproducible
bit-for-bit for identical inputs.
"""

from __future__ import annotations

import numpy as np


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape` (inverse of numpy broadcasting)."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, s in enumerate(shape):
        if s == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """Node of the computation tape."""

    __slots__ = ("value", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, value, parents=(), backward=None, requires_grad=False):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self._parents = parents if self.requires_grad else ()
        self._backward = backward if self.requires_grad else None

    @property
    def shape(self):
        return self.value.shape

    def _accumulate(self, grad):
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        self.grad += grad

    def backward(self):
        """Reverse sweep from this (scalar) tensor."""
        if self.value.ndim != 0:
            raise ValueError("backward() expects a scalar loss tensor")
        order: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in visited:
                    stack.append((p, False))
        self._accumulate(np.array(1.0))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- arithmetic ------------------------------------------------------

    def __add__(self, other):
        other = as_tensor(other)
        out_val = self.value + other.value

        def bw(g):
            if self.requires_grad:
                self._accumulate(_unbroadcast(g, self.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(g, other.shape))
        return Tensor(out_val, (self, other), bw)

    __radd__ = __add__

    def __sub__(self, other):
        other = as_tensor(other)
        out_val = self.value - other.value

        def bw(g):
            if self.requires_grad:
                self._accumulate(_unbroadcast(g, self.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(-g, other.shape))
        return Tensor(out_val, (self, other), bw)

    def __rsub__(self, other):
        return as_tensor(other) - self

    def __mul__(self, other):
        other = as_tensor(other)
        out_val = self.value * other.value

        def bw(g):
            if self.requires_grad:
                self._accumulate(_unbroadcast(g * other.value, self.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(g * self.value, other.shape))
        return Tensor(out_val, (self, other), bw)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_tensor(other)
        out_val = self.value / other.value

        def bw(g):
            if self.requires_grad:
                self._accumulate(_unbroadcast(g / other.value, self.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(-g * self.value / other.value ** 2,
                                               other.shape))
        return Tensor(out_val, (self, other), bw)

    def __neg__(self):
        return self * -1.0

    def __matmul__(self, other):
        other = as_tensor(other)
        out_val = self.value @ other.value

        def bw(g):
            if self.requires_grad:
                self._accumulate(g @ other.value.T)
            if other.requires_grad:
                other._accumulate(self.value.T @ g)
        return Tensor(out_val, (self, other), bw)

    # -- shaping ---------------------------------------------------------

    def reshape(self, *shape):
        src_shape = self.shape
        out_val = self.value.reshape(*shape)

        def bw(g):
            self._accumulate(g.reshape(src_shape))
        return Tensor(out_val, (self,), bw)

    def gather(self, index: np.ndarray):
        """Row gather x[index]; backward scatter-adds into the source rows."""
        index = np.asarray(index)
        out_val = self.value[index]

        def bw(g):
            acc = np.zeros_like(self.value)
            np.add.at(acc, index, g)
            self._accumulate(acc)
        return Tensor(out_val, (self,), bw)

    # -- elementwise -----------------------------------------------------

    def relu(self):
        mask = self.value > 0.0
        out_val = np.where(mask, self.value, 0.0)

        def bw(g):
            self._accumulate(np.where(mask, g, 0.0))
        return Tensor(out_val, (self,), bw)

    def abs(self):
        sign = np.sign(self.value)
        out_val = np.abs(self.value)

        def bw(g):
            self._accumulate(g * sign)
        return Tensor(out_val, (self,), bw)

    def sqrt(self):
        out_val = np.sqrt(self.value)

        def bw(g):
            self._accumulate(g * 0.5 / out_val)
        return Tensor(out_val, (self,), bw)

    # -- reductions ------------------------------------------------------

    def sum(self, axis=None, keepdims=False):
        out_val = self.value.sum(axis=axis, keepdims=keepdims)
        src_shape = self.shape

        def bw(g):
            if axis is None:
                self._accumulate(np.broadcast_to(g, src_shape).astype(np.float64))
                return
            axes = (axis,) if isinstance(axis, int) else tuple(axis)
            gg = g
            if not keepdims:
                for ax in sorted(a % len(src_shape) for a in axes):
                    gg = np.expand_dims(gg, ax)
            self._accumulate(np.broadcast_to(gg, src_shape).astype(np.float64))
        return Tensor(out_val, (self,), bw)

    def mean(self, axis=None, keepdims=False):
        if axis is None:
            n = self.value.size
        else:
            axes = (axis,) if isinstance(axis, int) else tuple(axis)
            n = int(np.prod([self.shape[a] for a in axes]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def parameter(value) -> Tensor:
    return Tensor(np.asarray(value, dtype=np.float64), requires_grad=True)


def concat(tensors: list[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out_val = np.concatenate([t.value for t in tensors], axis=axis)
    sizes = [t.value.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        for t, a, b in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(a, b)
                t._accumulate(g[tuple(sl)])
    return Tensor(out_val, tuple(tensors), bw)


def masked_max(x: Tensor, valid: np.ndarray) -> Tensor:
    """Max over axis 1 of (n, K, C), ignoring entries where `valid` (n, K) is
    False. Rows with no valid entry produce zeros. The backward pass routes
    each output's gradient to its argmax entry (lowest index on ties).
    """
    n, k, c = x.value.shape
    neg = np.where(valid[:, :, None], x.value, -np.inf)
    arg = np.argmax(neg, axis=1)                      # (n, C); first max wins
    any_valid = valid.any(axis=1)
    rows = np.arange(n)[:, None]
    chans = np.arange(c)[None, :]
    out_val = np.where(any_valid[:, None], neg[rows, arg, chans], 0.0)

    def bw(g):
        acc = np.zeros_like(x.value)
        gg = np.where(any_valid[:, None], g, 0.0)
        np.add.at(acc, (rows, arg, chans), gg)
        x._accumulate(acc)
    return Tensor(out_val, (x,), bw)


def weighted_sum(x: Tensor, weights: np.ndarray) -> Tensor:
    """Contraction out[i, c] = sum_k weights[i, k] * x[i, k, c] with constant
    weights (geometry is not differentiated)."""
    out_val = np.einsum("ik,ikc->ic", weights, x.value)

    def bw(g):
        x._accumulate(weights[:, :, None] * g[:, None, :])
    return Tensor(out_val, (x,), bw)
