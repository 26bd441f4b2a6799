"""Minimal dense-tensor core with reverse-mode automatic differentiation.

Everything runs on float64 numpy arrays. The graph is recorded eagerly:
each op returns a Tensor holding a backward closure over its parents.
Reductions use numpy's fixed row-major order, so identical inputs give
bitwise-identical outputs.

Every public op validates its output for NaN/Inf and raises
NonFiniteError instead of letting garbage propagate; training divergence
is supposed to surface loudly.
"""

from __future__ import annotations

import math
from contextlib import contextmanager

import numpy as np
from scipy.special import erf as _erf


class ShapeMismatchError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class NonFiniteError(FloatingPointError):
    """An op produced NaN or Inf."""


class GradContractError(RuntimeError):
    """backward() called in a way that violates its contract."""


_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording; ops return constant tensors."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _check_finite(arr):
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError("non-finite value in tensor")


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        _check_finite(self.data)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- graph ----------------------------------------------------------

    def detach(self):
        return Tensor(self.data)

    def backward(self):
        if self.data.ndim != 0:
            raise GradContractError("backward() requires a scalar loss")
        topo = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones((), dtype=np.float64)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operator sugar -------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __neg__(self):
        return neg(self)

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(as_tensor(other), self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return power(self, p)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)


def as_tensor(x):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def _accumulate(t, g):
    if not (t.requires_grad or t._backward is not None):
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad = t.grad + g


def _make(data, parents, backward):
    """Build an op output, dropping the graph when recording is off."""
    if _grad_enabled and any(p.requires_grad or p._backward is not None for p in parents):
        return Tensor(data, requires_grad=False, _parents=tuple(parents), _backward=backward)
    return Tensor(data)


def _unbroadcast(g, shape):
    """Sum gradient g down to `shape` after numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


# -- elementwise --------------------------------------------------------


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data + b.data

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _make(out_data, (a, b), backward)


def neg(a):
    a = as_tensor(a)

    def backward(g):
        _accumulate(a, -g)

    return _make(-a.data, (a,), backward)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data * b.data

    def backward(g):
        _accumulate(a, _unbroadcast(g * b.data, a.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _make(out_data, (a, b), backward)


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data / b.data

    def backward(g):
        _accumulate(a, _unbroadcast(g / b.data, a.shape))
        _accumulate(b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _make(out_data, (a, b), backward)


def power(a, p):
    a = as_tensor(a)
    p = float(p)
    out_data = a.data**p

    def backward(g):
        _accumulate(a, g * p * a.data ** (p - 1.0))

    return _make(out_data, (a,), backward)


def exp(a):
    a = as_tensor(a)
    out_data = np.exp(a.data)

    def backward(g):
        _accumulate(a, g * out_data)

    return _make(out_data, (a,), backward)


def log(a):
    a = as_tensor(a)
    out_data = np.log(a.data)

    def backward(g):
        _accumulate(a, g / a.data)

    return _make(out_data, (a,), backward)


def erf(a):
    a = as_tensor(a)
    out_data = _erf(a.data)
    two_over_sqrt_pi = 2.0 / math.sqrt(math.pi)

    def backward(g):
        _accumulate(a, g * two_over_sqrt_pi * np.exp(-a.data * a.data))

    return _make(out_data, (a,), backward)


# -- linear algebra -----------------------------------------------------


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeMismatchError("matmul needs >= 2-D operands")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeMismatchError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    out_data = a.data @ b.data

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        _accumulate(a, _unbroadcast(ga, a.shape))
        _accumulate(b, _unbroadcast(gb, b.shape))

    return _make(out_data, (a, b), backward)


# -- shape ops ----------------------------------------------------------


def reshape(a, shape):
    a = as_tensor(a)
    out_data = a.data.reshape(shape)

    def backward(g):
        _accumulate(a, g.reshape(a.shape))

    return _make(out_data, (a,), backward)


def transpose(a, axes=None):
    a = as_tensor(a)
    out_data = np.transpose(a.data, axes)
    if axes is None:
        inv = None
    else:
        inv = np.argsort(axes)

    def backward(g):
        _accumulate(a, np.transpose(g, inv))

    return _make(out_data, (a,), backward)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            _accumulate(t, g[tuple(sl)])

    return _make(out_data, tuple(tensors), backward)


def take(a, indices, axis):
    """Select rows along `axis` by integer index array."""
    a = as_tensor(a)
    indices = np.asarray(indices, dtype=np.intp)
    out_data = np.take(a.data, indices, axis=axis)

    def backward(g):
        ga = np.zeros_like(a.data)
        sl = [slice(None)] * a.ndim
        sl[axis] = indices
        np.add.at(ga, tuple(sl), g)
        _accumulate(a, ga)

    return _make(out_data, (a,), backward)


def slice_axis(a, axis, start, stop):
    a = as_tensor(a)
    sl = [slice(None)] * a.ndim
    sl[axis] = slice(start, stop)
    sl = tuple(sl)
    out_data = a.data[sl]

    def backward(g):
        ga = np.zeros_like(a.data)
        ga[sl] = g
        _accumulate(a, ga)

    return _make(out_data, (a,), backward)


# -- reductions ---------------------------------------------------------


def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(g, a.shape))

    return _make(out_data, (a,), backward)


def tmean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    if axis is None:
        count = a.size
    else:
        count = a.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / count)


# -- gradient control ---------------------------------------------------


def stop_gradient(a):
    """Value-identical tensor with no gradient flow to its source."""
    a = as_tensor(a)
    return Tensor(a.data)


# -- composite nn ops ---------------------------------------------------


def layer_norm(x, gain, bias, eps=1e-6):
    """Per-row (last axis) normalization followed by affine."""
    x = as_tensor(x)
    if eps <= 0:
        raise ValueError("eps must be positive")
    d = x.shape[-1]
    gain, bias = as_tensor(gain), as_tensor(bias)
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeMismatchError("layer_norm gain/bias must match feature dim")
    mu = tmean(x, axis=-1, keepdims=True)
    centered = x - mu
    var = tmean(mul(centered, centered), axis=-1, keepdims=True)
    inv = power(var + eps, -0.5)
    return mul(centered, inv) * gain + bias


def softmax_rows(x):
    """Row-wise softmax over the last axis, max-shifted for stability."""
    x = as_tensor(x)
    shift = np.max(x.data, axis=-1, keepdims=True)  # constant shift: exact gradient
    e = exp(x - shift)
    return div(e, tsum(e, axis=-1, keepdims=True))


def gelu(x):
    """Exact-erf GELU."""
    x = as_tensor(x)
    return mul(mul(x, 0.5), erf(x * (1.0 / math.sqrt(2.0))) + 1.0)


def log_softmax_rows(x):
    x = as_tensor(x)
    shift = np.max(x.data, axis=-1, keepdims=True)
    z = x - shift
    return z - log(tsum(exp(z), axis=-1, keepdims=True))


def backward(loss, params):
    """Gradients of a scalar loss w.r.t. a name->Tensor parameter dict.

    Frozen parameters (not reachable from the loss) simply get no entry.
    """
    loss = as_tensor(loss)
    if loss.ndim != 0:
        raise GradContractError("loss must be scalar")
    for p in params.values():
        p.grad = None
    loss.backward()
    return {name: p.grad for name, p in params.items() if p.grad is not None}
