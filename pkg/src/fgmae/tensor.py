"""Dense tensors with reverse-mode automatic differentiation.

Everything is backed by numpy arrays. A forward pass builds a graph of
Tensor nodes; ``backward()`` walks it once in reverse topological order and
accumulates gradients additively across fan-out. Single-threaded numpy ops
keep results bitwise deterministic.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import ndtr

DEFAULT_DTYPE = np.float32

_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class Tensor:
    """A dense n-d array that optionally participates in the gradient tape."""

    __slots__ = ("data", "requires_grad", "grad", "_backward", "_prev")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None
        self._backward = None
        self._prev = ()

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def item(self):
        return float(self.data)

    def numpy(self):
        return self.data

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def astype(self, dtype):
        out = _node(self.data.astype(dtype), (self,))
        if out.requires_grad:
            def _bw(g, a=self):
                _accum(a, g.astype(a.data.dtype))
            out._backward = _bw
        return out

    # -- graph machinery -----------------------------------------------------

    def backward(self, grad=None):
        """Reverse-mode sweep seeding ``grad`` (default: ones) at this node."""
        if grad is None:
            grad = np.ones_like(self.data)
        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._prev:
                if id(p) not in visited:
                    stack.append((p, False))
        self.grad = np.asarray(grad, dtype=self.data.dtype)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def zero_grad(self):
        self.grad = None

    # -- operators -----------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, -_wrap(other))

    def __rsub__(self, other):
        return add(_wrap(other), -self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_wrap(other), self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __getitem__(self, key):
        out = _node(self.data[key], (self,))
        if out.requires_grad:
            def _bw(g, a=self, key=key):
                ga = np.zeros_like(a.data)
                np.add.at(ga, key, g)
                _accum(a, ga)
            out._backward = _bw
        return out

    # convenience methods
    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def reshape(self, *dims):
        return reshape(self, *dims)

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)


def _wrap(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=DEFAULT_DTYPE))


def _node(data, prev):
    out = Tensor(data, requires_grad=any(p.requires_grad for p in prev))
    if out.requires_grad:
        out._prev = tuple(prev)
    return out


def _accum(t, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g.astype(t.data.dtype, copy=True)
    else:
        t.grad = t.grad + g.astype(t.data.dtype, copy=False)


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` after numpy broadcasting."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- elementwise arithmetic ---------------------------------------------------

def add(a, b):
    a, b = _wrap(a), _wrap(b)
    out = _node(a.data + b.data, (a, b))
    if out.requires_grad:
        def _bw(g, a=a, b=b):
            _accum(a, _unbroadcast(g, a.shape))
            _accum(b, _unbroadcast(g, b.shape))
        out._backward = _bw
    return out


def mul(a, b):
    a, b = _wrap(a), _wrap(b)
    out = _node(a.data * b.data, (a, b))
    if out.requires_grad:
        def _bw(g, a=a, b=b):
            _accum(a, _unbroadcast(g * b.data, a.shape))
            _accum(b, _unbroadcast(g * a.data, b.shape))
        out._backward = _bw
    return out


def div(a, b):
    a, b = _wrap(a), _wrap(b)
    out = _node(a.data / b.data, (a, b))
    if out.requires_grad:
        def _bw(g, a=a, b=b, out=out):
            _accum(a, _unbroadcast(g / b.data, a.shape))
            _accum(b, _unbroadcast(-g * out.data / b.data, b.shape))
        out._backward = _bw
    return out


def power(a, exponent):
    a = _wrap(a)
    out = _node(a.data ** exponent, (a,))
    if out.requires_grad:
        def _bw(g, a=a, e=exponent):
            _accum(a, g * e * a.data ** (e - 1))
        out._backward = _bw
    return out


def exp(a):
    a = _wrap(a)
    out = _node(np.exp(a.data), (a,))
    if out.requires_grad:
        def _bw(g, a=a, out=out):
            _accum(a, g * out.data)
        out._backward = _bw
    return out


def log(a):
    a = _wrap(a)
    out = _node(np.log(a.data), (a,))
    if out.requires_grad:
        def _bw(g, a=a):
            _accum(a, g / a.data)
        out._backward = _bw
    return out


def gelu(a):
    """x * Phi(x) with the exact Gaussian CDF."""
    a = _wrap(a)
    phi = ndtr(a.data).astype(a.data.dtype)
    out = _node(a.data * phi, (a,))
    if out.requires_grad:
        def _bw(g, a=a, phi=phi):
            pdf = (_INV_SQRT_2PI * np.exp(-0.5 * a.data * a.data)).astype(a.data.dtype)
            _accum(a, g * (phi + a.data * pdf))
        out._backward = _bw
    return out


# -- shape ops ----------------------------------------------------------------

def reshape(a, *dims):
    a = _wrap(a)
    if len(dims) == 1 and isinstance(dims[0], (tuple, list)):
        dims = tuple(dims[0])
    out = _node(a.data.reshape(dims), (a,))
    if out.requires_grad:
        def _bw(g, a=a):
            _accum(a, g.reshape(a.shape))
        out._backward = _bw
    return out


def transpose(a, axes=None):
    a = _wrap(a)
    out = _node(np.transpose(a.data, axes), (a,))
    if out.requires_grad:
        inv = None if axes is None else tuple(np.argsort(axes))
        def _bw(g, a=a, inv=inv):
            _accum(a, np.transpose(g, inv))
        out._backward = _bw
    return out


def swapaxes(a, ax1, ax2):
    a = _wrap(a)
    out = _node(np.swapaxes(a.data, ax1, ax2), (a,))
    if out.requires_grad:
        def _bw(g, a=a, ax1=ax1, ax2=ax2):
            _accum(a, np.swapaxes(g, ax1, ax2))
        out._backward = _bw
    return out


def concatenate(tensors, axis=0):
    tensors = [_wrap(t) for t in tensors]
    out = _node(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors))
    if out.requires_grad:
        sizes = [t.shape[axis] for t in tensors]
        splits = np.cumsum(sizes)[:-1]
        def _bw(g, tensors=tensors, splits=splits, axis=axis):
            for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
                _accum(t, piece)
        out._backward = _bw
    return out


def gather_tokens(x, idx):
    """Per-sample token gather: out[b, i, :] = x[b, idx[b, i], :]."""
    x = _wrap(x)
    idx = np.asarray(idx)
    expanded = np.broadcast_to(idx[:, :, None], idx.shape + (x.shape[-1],))
    out = _node(np.take_along_axis(x.data, expanded, axis=1), (x,))
    if out.requires_grad:
        def _bw(g, x=x, idx=idx):
            gx = np.zeros_like(x.data)
            b_idx = np.arange(x.shape[0])[:, None]
            np.add.at(gx, (b_idx, idx), g)
            _accum(x, gx)
        out._backward = _bw
    return out


# -- reductions ---------------------------------------------------------------

def tsum(a, axis=None, keepdims=False):
    a = _wrap(a)
    out = _node(a.data.sum(axis=axis, keepdims=keepdims), (a,))
    if out.requires_grad:
        def _bw(g, a=a, axis=axis, keepdims=keepdims):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            _accum(a, np.broadcast_to(g, a.shape))
        out._backward = _bw
    return out


def tmean(a, axis=None, keepdims=False):
    a = _wrap(a)
    n = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    # keep the 1/n factor in the operand dtype so f64 means stay f64-accurate
    inv = Tensor(np.asarray(1.0 / float(n), dtype=a.data.dtype))
    return tsum(a, axis, keepdims) * inv


# -- linear algebra -----------------------------------------------------------

def matmul(a, b):
    """Batched matrix product with numpy broadcasting over leading dims."""
    a, b = _wrap(a), _wrap(b)
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul inner dims disagree: {a.shape} @ {b.shape}")
    out = _node(np.matmul(a.data, b.data), (a, b))
    if out.requires_grad:
        def _bw(g, a=a, b=b):
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            _accum(a, _unbroadcast(ga, a.shape))
            _accum(b, _unbroadcast(gb, b.shape))
        out._backward = _bw
    return out


# -- normalization and activations -------------------------------------------

def softmax(x, axis=-1):
    """Last-axis softmax, stabilized by (detached) max subtraction."""
    x = _wrap(x)
    shifted = x - Tensor(x.data.max(axis=axis, keepdims=True))
    e = exp(shifted)
    return e / tsum(e, axis=axis, keepdims=True)


def layer_norm(x, gamma, beta, eps=1e-6):
    """Normalize the last axis to zero mean / unit variance, then affine."""
    x = _wrap(x)
    d = x.shape[-1]
    if d == 0:
        raise ValueError("layer_norm over an empty axis")
    mu = tmean(x, axis=-1, keepdims=True)
    centered = x - mu
    var = tmean(centered * centered, axis=-1, keepdims=True)
    inv = power(var + eps, -0.5)
    return centered * inv * gamma + beta


def log_softmax(x, axis=-1):
    x = _wrap(x)
    shifted = x - Tensor(x.data.max(axis=axis, keepdims=True))
    return shifted - log(tsum(exp(shifted), axis=axis, keepdims=True))


def softplus(x):
    """log(1 + exp(x)) via logaddexp; gradient is sigmoid(x)."""
    x = _wrap(x)
    out = _node(np.logaddexp(0.0, x.data), (x,))
    if out.requires_grad:
        def _bw(g, x=x):
            _accum(x, g / (1.0 + np.exp(-x.data)))
        out._backward = _bw
    return out


def sigmoid(x):
    x = _wrap(x)
    out = _node(1.0 / (1.0 + np.exp(-x.data)), (x,))
    if out.requires_grad:
        def _bw(g, x=x, out=out):
            _accum(x, g * out.data * (1.0 - out.data))
        out._backward = _bw
    return out


# -- verification -------------------------------------------------------------

def grad_check(f, x, h=1e-5):
    """Max relative error between tape gradient of scalar ``f`` and central
    finite differences, evaluated coordinate-wise in f64."""
    x64 = Tensor(x.data.astype(np.float64), requires_grad=True)
    out = f(x64)
    if out.size != 1:
        raise ValueError("grad_check requires a scalar-valued function")
    if not np.isfinite(out.data).all():
        raise ValueError("non-finite function value in grad_check")
    out.backward()
    g = x64.grad.reshape(-1)
    flat = x64.data.reshape(-1)
    num = np.empty_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(Tensor(x64.data, dtype=np.float64)).data)
        flat[i] = orig - h
        fm = float(f(Tensor(x64.data, dtype=np.float64)).data)
        flat[i] = orig
        num[i] = (fp - fm) / (2.0 * h)
    denom = np.maximum(1.0, np.abs(g))
    return float(np.max(np.abs(num - g) / denom))


def _param_list(params):
    return list(params.values()) if isinstance(params, dict) else list(params)


def global_grad_norm(params):
    total = 0.0
    for p in _param_list(params):
        if p.grad is not None:
            total += float(np.sum(p.grad.astype(np.float64) ** 2))
    return math.sqrt(total)


def clip_global_norm(params, max_norm):
    norm = global_grad_norm(params)
    if norm > max_norm > 0:
        scale = max_norm / norm
        for p in _param_list(params):
            if p.grad is not None:
                p.grad = p.grad * scale
    return norm
