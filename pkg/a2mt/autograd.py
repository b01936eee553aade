"""
Minimal reverse-mode automatic differentiation over numpy arrays.

A Tensor records the op that produced it and a closure that pushes its
output gradient to its parents; `backward()` walks the graph in reverse
topological order. Everything is float64.
"""

import numpy as np


def _unbroadcast(grad, shape):
    """Sum `grad` down to `shape` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    __array_priority__ = 100

    def __init__(self, value, parents=(), op="", requires_grad=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self._parents = parents
        self._backward = None
        self.op = op
        if requires_grad is None:
            requires_grad = any(p.requires_grad for p in parents)
        self.requires_grad = requires_grad

    def __repr__(self):
        return f"Tensor({self.value!r}, op={self.op!r})"

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def _accumulate(self, grad):
        if not self.requires_grad:
            return
        self.grad = grad.copy() if self.grad is None else self.grad + grad

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.value.copy())

    def backward(self, grad=None):
        if grad is None:
            if self.value.size != 1:
                raise ValueError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.value)

        order, seen = [], set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))

        self._accumulate(np.asarray(grad, dtype=np.float64))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # arithmetic

    def __add__(self, other):
        other = as_tensor(other)
        out = Tensor(self.value + other.value, (self, other), "add")
        out._backward = lambda g: (
            self._accumulate(_unbroadcast(g, self.shape)),
            other._accumulate(_unbroadcast(g, other.shape)),
        )
        return _track(out)

    __radd__ = __add__

    def __neg__(self):
        out = Tensor(-self.value, (self,), "neg")
        out._backward = lambda g: self._accumulate(-g)
        return _track(out)

    def __sub__(self, other):
        return self + (-as_tensor(other))

    def __rsub__(self, other):
        return as_tensor(other) + (-self)

    def __mul__(self, other):
        other = as_tensor(other)
        out = Tensor(self.value * other.value, (self, other), "mul")
        out._backward = lambda g: (
            self._accumulate(_unbroadcast(g * other.value, self.shape)),
            other._accumulate(_unbroadcast(g * self.value, other.shape)),
        )
        return _track(out)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_tensor(other)
        out = Tensor(self.value / other.value, (self, other), "div")
        out._backward = lambda g: (
            self._accumulate(_unbroadcast(g / other.value, self.shape)),
            other._accumulate(_unbroadcast(-g * self.value / other.value ** 2, other.shape)),
        )
        return _track(out)

    def __matmul__(self, other):
        other = as_tensor(other)
        if self.ndim != 2 or other.ndim != 2:
            raise ValueError(f"matmul expects 2-d operands, got {self.shape} @ {other.shape}")
        out = Tensor(self.value @ other.value, (self, other), "matmul")
        out._backward = lambda g: (
            self._accumulate(g @ other.value.T),
            other._accumulate(self.value.T @ g),
        )
        return _track(out)

    def __getitem__(self, index):
        out = Tensor(self.value[index], (self,), "getitem")

        def _backward(g):
            full = np.zeros_like(self.value)
            np.add.at(full, index, g)
            self._accumulate(full)

        out._backward = _backward
        return _track(out)

    def reshape(self, *shape):
        out = Tensor(self.value.reshape(*shape), (self,), "reshape")
        out._backward = lambda g: self._accumulate(g.reshape(self.shape))
        return _track(out)

    def sum(self, axis=None, keepdims=False):
        out = Tensor(self.value.sum(axis=axis, keepdims=keepdims), (self,), "sum")

        def _backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            self._accumulate(np.broadcast_to(g, self.shape))

        out._backward = _backward
        return _track(out)

    def mean(self, axis=None):
        count = self.value.size if axis is None else self.value.shape[axis]
        return self.sum(axis=axis) * (1.0 / count)

    # elementwise

    def tanh(self):
        y = np.tanh(self.value)
        out = Tensor(y, (self,), "tanh")
        out._backward = lambda g: self._accumulate(g * (1.0 - y * y))
        return _track(out)

    def sigmoid(self):
        y = _sigmoid(self.value)
        out = Tensor(y, (self,), "sigmoid")
        out._backward = lambda g: self._accumulate(g * y * (1.0 - y))
        return _track(out)

    def log_sigmoid(self):
        out = Tensor(-np.logaddexp(0.0, -self.value), (self,), "log_sigmoid")
        out._backward = lambda g: self._accumulate(g * (1.0 - _sigmoid(self.value)))
        return _track(out)

    def exp(self):
        y = np.exp(self.value)
        out = Tensor(y, (self,), "exp")
        out._backward = lambda g: self._accumulate(g * y)
        return _track(out)

    def log(self):
        out = Tensor(np.log(self.value), (self,), "log")
        out._backward = lambda g: self._accumulate(g / self.value)
        return _track(out)

    def log_softmax(self, axis=-1):
        shifted = self.value - self.value.max(axis=axis, keepdims=True)
        logp = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
        out = Tensor(logp, (self,), "log_softmax")
        out._backward = lambda g: self._accumulate(
            g - np.exp(logp) * g.sum(axis=axis, keepdims=True)
        )
        return _track(out)

    def softmax(self, axis=-1):
        return self.log_softmax(axis=axis).exp()


def _sigmoid(x):
    return np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))


_grad_enabled = [True]


def _track(out):
    if not _grad_enabled[0]:
        out._parents = ()
        out._backward = None
        out.requires_grad = False
    return out


class no_grad:
    """Context manager that stops graph recording."""

    def __enter__(self):
        self.prev = _grad_enabled[0]
        _grad_enabled[0] = False

    def __exit__(self, *exc):
        _grad_enabled[0] = self.prev


def as_tensor(value):
    return value if isinstance(value, Tensor) else Tensor(value)


def parameter(value):
    return Tensor(value, requires_grad=True)


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    out = Tensor(np.concatenate([t.value for t in tensors], axis=axis), tuple(tensors), "concat")
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def _backward(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            index = [slice(None)] * g.ndim
            index[axis] = slice(lo, hi)
            t._accumulate(g[tuple(index)])

    out._backward = _backward
    return _track(out)


def straight_through(hard, soft):
    """Forward value `hard`, gradient of `soft`."""
    return soft + Tensor(np.asarray(hard, dtype=np.float64) - soft.value)
