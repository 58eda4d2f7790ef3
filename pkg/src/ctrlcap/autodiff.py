"""Minimal reverse-mode autodiff over dense float64 numpy arrays.

A Tensor wraps an ndarray; every op that touches a tensor requiring grad
records a backward closure on the result, forming a per-forward-pass tape.
backward() walks the tape once in reverse topological order and accumulates
gradients additively into every reachable leaf. The tape is released after
backward, so graphs are single-use.

All results are checked for NaN/Inf immediately; softmax subtracts the max
before exponentiating.
"""

from __future__ import annotations

import contextlib

import numpy as np

from .errors import DimensionError, NumericError, UsageError

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (decoding, evaluation)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad=False):
        arr = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NumericError("non-finite values in tensor literal")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = ()
        self._backward = None
        self.op = "leaf"

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(op={self.op}, shape={self.shape}, requires_grad={self.requires_grad})"

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
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __getitem__(self, key):
        return getitem(self, key)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward, op):
    if not np.all(np.isfinite(data)):
        raise NumericError(f"non-finite result in op '{op}'")
    track = _grad_enabled and any(p.requires_grad for p in parents)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = track
    out.grad = None
    if track:
        out._parents = tuple(parents)
        out._backward = backward
        out.op = op
    else:
        out._parents = ()
        out._backward = None
        out.op = op
    return out


def _accum(t: Tensor, g):
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _unbroadcast(grad, shape):
    """Sum grad down to `shape` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


# ---------------------------------------------------------------- elementwise


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g, b.data.shape))

    return _make(data, (a, b), backward, "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    data = a.data - b.data

    def backward(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(-g, b.data.shape))

    return _make(data, (a, b), backward, "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _make(data, (a, b), backward, "mul")


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    with np.errstate(divide="ignore", invalid="ignore"):
        data = a.data / b.data

    def backward(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g / b.data, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _make(data, (a, b), backward, "div")


def sigmoid(x):
    x = as_tensor(x)
    out_data = np.empty_like(x.data)
    pos = x.data >= 0
    out_data[pos] = 1.0 / (1.0 + np.exp(-x.data[pos]))
    ex = np.exp(x.data[~pos])
    out_data[~pos] = ex / (1.0 + ex)

    def backward(g):
        if x.requires_grad:
            _accum(x, g * out_data * (1.0 - out_data))

    return _make(out_data, (x,), backward, "sigmoid")


def tanh(x):
    x = as_tensor(x)
    out_data = np.tanh(x.data)

    def backward(g):
        if x.requires_grad:
            _accum(x, g * (1.0 - out_data * out_data))

    return _make(out_data, (x,), backward, "tanh")


def relu(x):
    x = as_tensor(x)
    out_data = np.maximum(x.data, 0.0)

    def backward(g):
        if x.requires_grad:
            _accum(x, g * (x.data > 0.0))

    return _make(out_data, (x,), backward, "relu")


def exp(x):
    x = as_tensor(x)
    out_data = np.exp(x.data)

    def backward(g):
        if x.requires_grad:
            _accum(x, g * out_data)

    return _make(out_data, (x,), backward, "exp")


def log(x):
    x = as_tensor(x)
    with np.errstate(divide="ignore", invalid="ignore"):
        out_data = np.log(x.data)

    def backward(g):
        if x.requires_grad:
            _accum(x, g / x.data)

    return _make(out_data, (x,), backward, "log")


def clip_min(x, lo):
    """Elementwise max(x, lo); gradient flows only where x > lo."""
    x = as_tensor(x)
    out_data = np.maximum(x.data, lo)

    def backward(g):
        if x.requires_grad:
            _accum(x, g * (x.data > lo))

    return _make(out_data, (x,), backward, "clip_min")


# ------------------------------------------------------------------- linear


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim not in (1, 2) or b.ndim not in (1, 2):
        raise DimensionError(f"matmul supports 1-D/2-D operands, got {a.shape} @ {b.shape}")
    try:
        data = a.data @ b.data
    except ValueError as e:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}") from e

    def backward(g):
        if a.ndim == 2 and b.ndim == 2:
            if a.requires_grad:
                _accum(a, g @ b.data.T)
            if b.requires_grad:
                _accum(b, a.data.T @ g)
        elif a.ndim == 2 and b.ndim == 1:
            if a.requires_grad:
                _accum(a, np.outer(g, b.data))
            if b.requires_grad:
                _accum(b, a.data.T @ g)
        elif a.ndim == 1 and b.ndim == 2:
            if a.requires_grad:
                _accum(a, b.data @ g)
            if b.requires_grad:
                _accum(b, np.outer(a.data, g))
        else:  # both 1-D: dot product
            if a.requires_grad:
                _accum(a, g * b.data)
            if b.requires_grad:
                _accum(b, g * a.data)

    return _make(data, (a, b), backward, "matmul")


def transpose(x):
    x = as_tensor(x)

    def backward(g):
        if x.requires_grad:
            _accum(x, g.T)

    return _make(x.data.T, (x,), backward, "transpose")


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                _accum(t, g[tuple(sl)])

    return _make(data, tuple(tensors), backward, "concat")


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    data = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        for i, t in enumerate(tensors):
            if t.requires_grad:
                _accum(t, np.take(g, i, axis=axis))

    return _make(data, tuple(tensors), backward, "stack")


def getitem(x, key):
    x = as_tensor(x)
    data = x.data[key]

    def backward(g):
        if x.requires_grad:
            full = np.zeros_like(x.data)
            np.add.at(full, key, g)
            _accum(x, full)

    return _make(data, (x,), backward, "getitem")


def reshape(x, shape):
    x = as_tensor(x)

    def backward(g):
        if x.requires_grad:
            _accum(x, g.reshape(x.data.shape))

    return _make(x.data.reshape(shape), (x,), backward, "reshape")


# --------------------------------------------------------------- reductions


def tsum(x, axis=None, keepdims=False):
    x = as_tensor(x)
    data = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if x.requires_grad:
            if axis is None:
                _accum(x, np.full_like(x.data, 1.0) * g)
            else:
                gg = g if keepdims else np.expand_dims(g, axis)
                _accum(x, np.broadcast_to(gg, x.data.shape).copy())

    return _make(data, (x,), backward, "sum")


def tmean(x, axis=None, keepdims=False):
    x = as_tensor(x)
    n = x.data.size if axis is None else x.data.shape[axis]
    return mul(tsum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def softmax(x):
    """Softmax over the last axis, with max-subtraction for stability."""
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        if x.requires_grad:
            dot = (g * out_data).sum(axis=-1, keepdims=True)
            _accum(x, out_data * (g - dot))

    return _make(out_data, (x,), backward, "softmax")


def log_softmax(x):
    """Log of softmax over the last axis."""
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out_data = shifted - lse
    probs = np.exp(out_data)

    def backward(g):
        if x.requires_grad:
            tot = g.sum(axis=-1, keepdims=True)
            _accum(x, g - probs * tot)

    return _make(out_data, (x,), backward, "log_softmax")


def pick(x, index):
    """Scalar element x[index] of a 1-D tensor."""
    x = as_tensor(x)
    if x.ndim != 1:
        raise DimensionError(f"pick expects a 1-D tensor, got shape {x.shape}")

    def backward(g):
        if x.requires_grad:
            full = np.zeros_like(x.data)
            full[index] = g
            _accum(x, full)

    return _make(np.asarray(x.data[index]), (x,), backward, "pick")


# ----------------------------------------------------------------- backward


def backward(root: Tensor):
    """Backpropagate from a scalar root through the recorded tape.

    Every requires_grad leaf reachable from root accumulates its gradient.
    The tape is released afterwards; the graph cannot be replayed.
    """
    if root.data.size != 1:
        raise UsageError(f"backward root must be scalar, got shape {root.shape}")
    topo = []
    visited = set()
    stack_ = [(root, False)]
    while stack_:
        node, processed = stack_.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack_.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack_.append((p, False))

    root.grad = np.ones_like(root.data)
    for node in reversed(topo):
        if node._backward is not None:
            node._backward(node.grad)
    # free the tape; leaf grads survive
    for node in topo:
        if node._backward is not None:
            node._backward = None
            node._parents = ()
            node.grad = None if node is not root else node.grad
