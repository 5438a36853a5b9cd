"""Dense float64 tensors with reverse-mode automatic differentiation.

Deliberately small: 1-D/2-D arrays, 2-D matmul, and the handful of
gather/scatter ops that token dispatch needs. Everything is float64 so
finite-difference gradient checks are meaningful.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class Tensor:
    """A node in the (implicit) computation graph.

    ``data`` is always a float64 ndarray. ``grad`` is allocated lazily
    during backward and has the same shape as ``data``. Tensors are
    immutable after construction except for grad accumulation.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None

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
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- operator sugar -------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(other, mul(self, -1.0))

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self):
        """Reverse-mode sweep from a scalar loss.

        Visits each recorded op exactly once (reverse topological order)
        and accumulates into ``grad`` of every requires_grad tensor.
        """
        if self.data.size != 1:
            raise ValueError(f"backward() needs a scalar, got shape {self.shape}")
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
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None:
                node._backward()


def _coerce(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward):
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _accum(t, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _unbroadcast(g, shape):
    """Sum gradient g down to the given (broadcast-source) shape."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, dim in enumerate(shape):
        if dim == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g.reshape(shape)


def add(a, b):
    a, b = _coerce(a), _coerce(b)
    out_data = a.data + b.data

    def backward():
        g = out.grad
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    out = _make(out_data, (a, b), backward)
    return out


def mul(a, b):
    a, b = _coerce(a), _coerce(b)
    out_data = a.data * b.data

    def backward():
        g = out.grad
        _accum(a, _unbroadcast(g * b.data, a.data.shape))
        _accum(b, _unbroadcast(g * a.data, b.data.shape))

    out = _make(out_data, (a, b), backward)
    return out


def matmul(a, b):
    a, b = _coerce(a), _coerce(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul inner dims disagree: {a.shape} @ {b.shape}")
    out_data = a.data @ b.data

    def backward():
        g = out.grad
        _accum(a, g @ b.data.T)
        _accum(b, a.data.T @ g)

    out = _make(out_data, (a, b), backward)
    return out


def transpose(a):
    a = _coerce(a)

    def backward():
        _accum(a, out.grad.T)

    out = _make(a.data.T, (a,), backward)
    return out


def tsum(a, axis=None, keepdims=False):
    a = _coerce(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward():
        g = out.grad
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g, a.data.shape).copy())

    out = _make(out_data, (a,), backward)
    return out


def tmean(a, axis=None):
    a = _coerce(a)
    n = a.data.size if axis is None else a.data.shape[axis]
    return mul(tsum(a, axis=axis), 1.0 / n)


def softmax(x, axis=-1):
    """Numerically stabilized softmax; slices along ``axis`` sum to 1."""
    x = _coerce(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward():
        g = out.grad
        dot = (g * y).sum(axis=axis, keepdims=True)
        _accum(x, y * (g - dot))

    out = _make(y, (x,), backward)
    return out


def layer_norm(x, gain, bias, eps=1e-6):
    """Normalize each last-dim slice to zero mean / unit variance, then affine."""
    x, gain, bias = _coerce(x), _coerce(gain), _coerce(bias)
    h = x.data.shape[-1]
    if h == 0:
        raise ValueError("layer_norm over an empty last dimension")
    if gain.data.shape != (h,) or bias.data.shape != (h,):
        raise ValueError(f"gain/bias must have shape ({h},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv_sigma = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv_sigma
    y = xhat * gain.data + bias.data

    def backward():
        g = out.grad
        gy = g * gain.data
        _accum(gain, _unbroadcast(g * xhat, gain.data.shape))
        _accum(bias, _unbroadcast(g, bias.data.shape))
        m1 = gy.mean(axis=-1, keepdims=True)
        m2 = (gy * xhat).mean(axis=-1, keepdims=True)
        _accum(x, inv_sigma * (gy - m1 - xhat * m2))

    out = _make(y, (x, gain, bias), backward)
    return out


def relu(x):
    x = _coerce(x)
    mask = x.data > 0

    def backward():
        _accum(x, out.grad * mask)

    out = _make(x.data * mask, (x,), backward)
    return out


def gelu(x):
    """Exact erf-form GeLU: 0.5 * x * (1 + erf(x / sqrt(2)))."""
    x = _coerce(x)
    phi = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    y = x.data * phi

    def backward():
        pdf = np.exp(-0.5 * x.data * x.data) * _INV_SQRT_2PI
        _accum(x, out.grad * (phi + x.data * pdf))

    out = _make(y, (x,), backward)
    return out


def cross_entropy(logits, targets):
    """Mean negative log-likelihood of integer targets under row logits."""
    logits = _coerce(logits)
    targets = np.asarray(targets, dtype=np.int64)
    n, v = logits.data.shape
    if targets.shape != (n,):
        raise ValueError(f"targets must have shape ({n},), got {targets.shape}")
    if targets.min(initial=0) < 0 or targets.max(initial=0) >= v:
        raise ValueError(f"target ids must lie in [0, {v})")
    m = logits.data.max(axis=1, keepdims=True)
    z = logits.data - m
    lse = np.log(np.exp(z).sum(axis=1)) + m[:, 0]
    picked = logits.data[np.arange(n), targets]
    loss = (lse - picked).mean()

    def backward():
        g = out.grad.reshape(())
        probs = np.exp(z)
        probs /= probs.sum(axis=1, keepdims=True)
        probs[np.arange(n), targets] -= 1.0
        _accum(logits, probs * (float(g) / n))

    out = _make(np.float64(loss), (logits,), backward)
    return out


def take_rows(x, idx):
    """Differentiable row gather: out[i] = x[idx[i]]."""
    x = _coerce(x)
    idx = np.asarray(idx, dtype=np.int64)

    def backward():
        g = np.zeros_like(x.data)
        np.add.at(g, idx, out.grad)
        _accum(x, g)

    out = _make(x.data[idx], (x,), backward)
    return out


def scatter_rows(values, idx, n_rows):
    """Inverse of take_rows: out[idx[i]] += values[i], duplicates summed."""
    values = _coerce(values)
    idx = np.asarray(idx, dtype=np.int64)
    data = np.zeros((n_rows,) + values.data.shape[1:], dtype=np.float64)
    np.add.at(data, idx, values.data)

    def backward():
        _accum(values, out.grad[idx])

    out = _make(data, (values,), backward)
    return out


def take_entries(x, rows, cols):
    """Gather scalar entries x[rows[i], cols[i]] into a column vector."""
    x = _coerce(x)
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)

    def backward():
        g = np.zeros_like(x.data)
        np.add.at(g, (rows, cols), out.grad[:, 0])
        _accum(x, g)

    out = _make(x.data[rows, cols][:, None], (x,), backward)
    return out


def col_slice(x, j0, j1):
    x = _coerce(x)

    def backward():
        g = np.zeros_like(x.data)
        g[:, j0:j1] = out.grad
        _accum(x, g)

    out = _make(x.data[:, j0:j1].copy(), (x,), backward)
    return out


def row_slice(x, i0, i1):
    x = _coerce(x)

    def backward():
        g = np.zeros_like(x.data)
        g[i0:i1] = out.grad
        _accum(x, g)

    out = _make(x.data[i0:i1].copy(), (x,), backward)
    return out


def concat_rows(parts):
    parts = [_coerce(p) for p in parts]
    sizes = [p.data.shape[0] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def backward():
        for p, o0, o1 in zip(parts, offsets[:-1], offsets[1:]):
            _accum(p, out.grad[o0:o1])

    out = _make(np.concatenate([p.data for p in parts], axis=0), tuple(parts), backward)
    return out


def concat_cols(parts):
    parts = [_coerce(p) for p in parts]
    sizes = [p.data.shape[1] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def backward():
        for p, o0, o1 in zip(parts, offsets[:-1], offsets[1:]):
            _accum(p, out.grad[:, o0:o1])

    out = _make(np.concatenate([p.data for p in parts], axis=1), tuple(parts), backward)
    return out


def top_k_indices(scores, k):
    """Indices of the k largest values, descending, ties broken by lowest index.

    Pure function of its inputs; accepts a 1-D array-like or Tensor row.
    """
    if isinstance(scores, Tensor):
        scores = scores.data
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    if k > scores.size:
        raise ValueError(f"k={k} exceeds row length {scores.size}")
    order = np.argsort(-scores, kind="stable")
    return [int(i) for i in order[:k]]


def check_finite(t, what="tensor"):
    data = t.data if isinstance(t, Tensor) else np.asarray(t)
    if not np.all(np.isfinite(data)):
        raise FloatingPointError(f"non-finite values in {what}")
    return t
