"""Reverse-mode autodiff core: a numpy-backed Tensor and its elementwise ops.

Each operation builds the output tensor eagerly and attaches a closure that
propagates gradients to its parents. ``Tensor.backward()`` runs the closures
in reverse topological order, accumulating into ``.grad`` so fan-out adds up
correctly.
"""

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible for an op."""


def _unbroadcast(grad, shape):
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """N-d array with an optional gradient accumulator.

    ``data`` is always a numpy array; ``grad`` is lazily allocated with the
    same shape on the first backward pass. Tensors with
    ``requires_grad=False`` never hold gradients and can be shared freely.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad=False, parents=(), op="leaf"):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = parents
        self._backward = None
        self.op = op

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(op={self.op!r}, shape={self.shape}, requires_grad={self.requires_grad})"

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def accumulate_grad(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def zero_grad(self):
        self.grad = None

    def backward(self):
        """Backpropagate from this tensor. It must hold a single scalar."""
        if self.data.size != 1:
            raise ValueError(f"backward() needs a scalar loss, got shape {self.shape}")
        order = topo_order(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- elementwise / structural ops ------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def sum(self):
        return tsum(self)

    def reshape(self, *shape):
        return reshape(self, shape)


def topo_order(root):
    """Nodes reachable from `root`, parents before children, each once."""
    order = []
    seen = set()
    stack = [(root, iter(root._parents))]
    seen.add(id(root))
    while stack:
        node, parents = stack[-1]
        advanced = False
        for p in parents:
            if id(p) not in seen:
                seen.add(id(p))
                stack.append((p, iter(p._parents)))
                advanced = True
                break
        if not advanced:
            order.append(node)
            stack.pop()
    return order


def _lift(x, like):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def _result(data, parents, op, backward):
    requires = any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=requires, parents=tuple(parents) if requires else (), op=op)
    if requires:
        out._backward = backward
    return out


def add(a, b):
    a = a if isinstance(a, Tensor) else Tensor(np.asarray(a))
    b = _lift(b, a)

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g, b.shape))

    return _result(a.data + b.data, (a, b), "add", backward)


def sub(a, b):
    a = a if isinstance(a, Tensor) else Tensor(np.asarray(a))
    b = _lift(b, a)

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(-g, b.shape))

    return _result(a.data - b.data, (a, b), "sub", backward)


def mul(a, b):
    a = a if isinstance(a, Tensor) else Tensor(np.asarray(a))
    b = _lift(b, a)

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g * a.data, b.shape))

    return _result(a.data * b.data, (a, b), "mul", backward)


def relu(x):
    mask = x.data > 0

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(g * mask)

    return _result(np.where(mask, x.data, 0.0), (x,), "relu", backward)


def sigmoid(x):
    s = 1.0 / (1.0 + np.exp(-np.clip(x.data, -60.0, 60.0)))

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(g * s * (1.0 - s))

    return _result(s, (x,), "sigmoid", backward)


def log(x):
    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(g / x.data)

    return _result(np.log(x.data), (x,), "log", backward)


def clip_min(x, floor):
    """Elementwise max(x, floor); gradient passes only where x > floor."""
    mask = x.data > floor

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(g * mask)

    return _result(np.where(mask, x.data, floor), (x,), "clip_min", backward)


def tsum(x):
    """Sum of all elements, producing a scalar tensor."""

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(np.full_like(x.data, float(g)))

    return _result(np.asarray(x.data.sum()), (x,), "sum", backward)


def reshape(x, shape):
    old_shape = x.data.shape

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(g.reshape(old_shape))

    return _result(x.data.reshape(shape), (x,), "reshape", backward)


def matmul(a, b):
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.data.shape} and {b.data.shape}")

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g @ b.data.T)
        if b.requires_grad:
            b.accumulate_grad(a.data.T @ g)

    return _result(a.data @ b.data, (a, b), "matmul", backward)
