"""Dense float64 tensors with reverse-mode automatic differentiation.

Everything downstream only touches 1-D and 2-D row-major arrays, so this
stays deliberately small: a :class:`Tensor` wraps a numpy array, every op
records a backward closure on its output, and ``backward()`` on a scalar
walks the recorded graph once, accumulating gradients additively into each
``requires_grad`` leaf. The graph is private to the values that built it;
forward passes over shared read-only weights are safe from multiple
threads as long as each logical training thread owns its own loss graph.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from typing import Callable, Iterator, Sequence

import numpy as np
from scipy.special import erf

from .errors import DimensionError, EvaluationError

Array = np.ndarray

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _as_data(x) -> Array:
    return np.asarray(x, dtype=np.float64)


class Tensor:
    """A float64 array plus an optional gradient accumulator.

    ``data`` is the value, ``grad`` collects d(scalar loss)/d(data) once
    ``backward()`` has run on a downstream scalar. Interior nodes carry a
    closure that routes their gradient to their parents.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data: Array = _as_data(data)
        self.requires_grad = bool(requires_grad)
        self.grad: Array | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def item(self) -> float:
        return float(self.data)

    def _acc(self, g: Array) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Reverse-mode sweep seeded with d(self)/d(self) = 1. Scalar only."""
        if self.data.size != 1:
            raise ValueError(f"backward() needs a scalar, got shape {self.shape}")
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
            for parent in node._parents:
                if id(parent) not in visited:
                    stack.append((parent, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward()

    # Operator sugar; all defer to the module-level ops below.
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, key):
        return slice_(self, key)

    def sum(self, axis: int | None = None, keepdims: bool = False) -> "Tensor":
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis: int | None = None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, shape: tuple[int, ...]) -> "Tensor":
        return reshape(self, shape)

    def __repr__(self) -> str:
        grad = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{grad})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: Array, parents: Sequence[Tensor], backward: Callable[[], None]) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: Array, shape: tuple[int, ...]) -> Array:
    """Sum `g` back down to `shape` after a numpy-broadcast forward op."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# MAC instrumentation


class MacCounter:
    """Tallies multiply-accumulate counts of matmuls run while active."""

    def __init__(self) -> None:
        self.records: list[tuple[int, int, int]] = []

    @property
    def total(self) -> int:
        return sum(m * k * n for m, k, n in self.records)

    def total_where(self, pred: Callable[[int, int, int], bool]) -> int:
        return sum(m * k * n for m, k, n in self.records if pred(m, k, n))


_MAC_STACK: list[MacCounter] = []


@contextmanager
def count_macs() -> Iterator[MacCounter]:
    """Record (m, k, n) for every matmul in the block. Single-threaded use."""
    counter = MacCounter()
    _MAC_STACK.append(counter)
    try:
        yield counter
    finally:
        _MAC_STACK.pop()


# ---------------------------------------------------------------------------
# Elementwise and structural ops


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data + b.data

    def bw():
        if a.requires_grad:
            a._acc(_unbroadcast(out.grad, a.data.shape))
        if b.requires_grad:
            b._acc(_unbroadcast(out.grad, b.data.shape))

    out = _node(data, (a, b), bw)
    return out


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data - b.data

    def bw():
        if a.requires_grad:
            a._acc(_unbroadcast(out.grad, a.data.shape))
        if b.requires_grad:
            b._acc(_unbroadcast(-out.grad, b.data.shape))

    out = _node(data, (a, b), bw)
    return out


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data * b.data

    def bw():
        if a.requires_grad:
            a._acc(_unbroadcast(out.grad * b.data, a.data.shape))
        if b.requires_grad:
            b._acc(_unbroadcast(out.grad * a.data, b.data.shape))

    out = _node(data, (a, b), bw)
    return out


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data / b.data

    def bw():
        if a.requires_grad:
            a._acc(_unbroadcast(out.grad / b.data, a.data.shape))
        if b.requires_grad:
            b._acc(_unbroadcast(-out.grad * a.data / (b.data * b.data), b.data.shape))

    out = _node(data, (a, b), bw)
    return out


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    p = float(p)
    data = a.data**p

    def bw():
        if a.requires_grad:
            a._acc(out.grad * p * a.data ** (p - 1.0))

    out = _node(data, (a,), bw)
    return out


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    data = np.sqrt(a.data)

    def bw():
        if a.requires_grad:
            a._acc(out.grad * 0.5 / data)

    out = _node(data, (a,), bw)
    return out


def gelu(a) -> Tensor:
    """Exact Gaussian-error-linear unit; smooth, so finite differences agree."""
    a = as_tensor(a)
    cdf = 0.5 * (1.0 + erf(a.data * _INV_SQRT2))
    data = a.data * cdf

    def bw():
        if a.requires_grad:
            pdf = np.exp(-0.5 * a.data * a.data) * _INV_SQRT_2PI
            a._acc(out.grad * (cdf + a.data * pdf))

    out = _node(data, (a,), bw)
    return out


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise DimensionError(
            f"matmul needs (m,k) @ (k,n); got {a.data.shape} @ {b.data.shape}"
        )
    if _MAC_STACK:
        m, k = a.data.shape
        n = b.data.shape[1]
        for counter in _MAC_STACK:
            counter.records.append((m, k, n))
    data = a.data @ b.data

    def bw():
        if a.requires_grad:
            a._acc(out.grad @ b.data.T)
        if b.requires_grad:
            b._acc(a.data.T @ out.grad)

    out = _node(data, (a, b), bw)
    return out


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise DimensionError(f"transpose needs a 2-D tensor, got shape {a.data.shape}")
    data = a.data.T.copy()

    def bw():
        if a.requires_grad:
            a._acc(out.grad.T)

    out = _node(data, (a,), bw)
    return out


def reshape(a, shape: tuple[int, ...]) -> Tensor:
    a = as_tensor(a)
    data = a.data.reshape(shape)

    def bw():
        if a.requires_grad:
            a._acc(out.grad.reshape(a.data.shape))

    out = _node(data, (a,), bw)
    return out


def slice_(a, key) -> Tensor:
    """Basic indexing (ints, slices, tuples thereof). Fancy indexing lives in
    :func:`gather_rows`."""
    a = as_tensor(a)
    data = a.data[key].copy()

    def bw():
        if a.requires_grad:
            buf = np.zeros_like(a.data)
            buf[key] += out.grad
            a._acc(buf)

    out = _node(data, (a,), bw)
    return out


def gather_rows(a, indices) -> Tensor:
    """Select rows of a 2-D tensor by integer index (embedding lookup)."""
    a = as_tensor(a)
    idx = np.asarray(indices, dtype=np.intp)
    if a.data.ndim != 2:
        raise DimensionError(f"gather_rows needs a 2-D tensor, got shape {a.data.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= a.data.shape[0]):
        raise IndexError(f"row index out of range for {a.data.shape[0]} rows")
    data = a.data[idx]

    def bw():
        if a.requires_grad:
            buf = np.zeros_like(a.data)
            np.add.at(buf, idx, out.grad)
            a._acc(buf)

    out = _node(data, (a,), bw)
    return out


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = [as_tensor(t) for t in tensors]
    data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]

    def bw():
        offset = 0
        for p, size in zip(parts, sizes):
            if p.requires_grad:
                sel = [slice(None)] * data.ndim
                sel[axis] = slice(offset, offset + size)
                p._acc(out.grad[tuple(sel)])
            offset += size

    out = _node(data, parts, bw)
    return out


def sum_(a, axis: int | None = None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def bw():
        if a.requires_grad:
            g = out.grad
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            a._acc(np.broadcast_to(g, a.data.shape))

    out = _node(data, (a,), bw)
    return out


def mean(a, axis: int | None = None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    count = a.data.size if axis is None else a.data.shape[axis]
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / count)


# ---------------------------------------------------------------------------
# Row-structured ops


def softmax_rows(a) -> Tensor:
    """Row-wise softmax of a 2-D tensor; shift-invariant, rows sum to one."""
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise DimensionError(f"softmax_rows needs a 2-D tensor, got shape {a.data.shape}")
    shifted = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=1, keepdims=True)

    def bw():
        if a.requires_grad:
            g = out.grad
            dot = (g * data).sum(axis=1, keepdims=True)
            a._acc(data * (g - dot))

    out = _node(data, (a,), bw)
    return out


def logsumexp_rows(a) -> Tensor:
    """Row-wise log-sum-exp of a 2-D tensor, returned as a 1-D tensor."""
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise DimensionError(f"logsumexp_rows needs a 2-D tensor, got shape {a.data.shape}")
    m = a.data.max(axis=1, keepdims=True)
    e = np.exp(a.data - m)
    s = e.sum(axis=1, keepdims=True)
    data = (m + np.log(s)).reshape(-1)

    def bw():
        if a.requires_grad:
            a._acc(out.grad[:, None] * (e / s))

    out = _node(data, (a,), bw)
    return out


def layer_norm(a, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean and unit variance, then affine.

    ``eps`` sits inside the variance denominator, so a constant input maps
    to the bias exactly.
    """
    a, gain, bias = as_tensor(a), as_tensor(gain), as_tensor(bias)
    d = a.data.shape[-1]
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise DimensionError(
            f"layer_norm gain/bias must have shape ({d},); "
            f"got {gain.data.shape} and {bias.data.shape}"
        )
    mu = mean(a, axis=a.data.ndim - 1, keepdims=True)
    centered = sub(a, mu)
    var = mean(mul(centered, centered), axis=a.data.ndim - 1, keepdims=True)
    normed = div(centered, sqrt(add(var, eps)))
    return add(mul(normed, gain), bias)


# ---------------------------------------------------------------------------
# Gradient verification


def finite_diff_check(
    f: Callable[[Tensor], Tensor], x, h: float = 1e-4
) -> float:
    """Compare reverse-mode gradients of scalar ``f`` against central
    differences at ``x``.

    Returns the max over coordinates of |g_ad - g_fd| / max(1, |g_fd|).
    """
    if not (1e-5 <= h <= 1e-2):
        raise ValueError(f"step size h={h} outside [1e-5, 1e-2]")
    x0 = _as_data(x).copy()
    leaf = Tensor(x0.copy(), requires_grad=True)
    y = f(leaf)
    if y.data.size != 1:
        raise ValueError(f"finite_diff_check needs a scalar-valued f, got shape {y.shape}")
    if not np.isfinite(y.data).all():
        raise EvaluationError("f(x) is not finite")
    y.backward()
    analytic = leaf.grad.copy() if leaf.grad is not None else np.zeros_like(x0)

    def value_at(pt: Array) -> float:
        v = f(Tensor(pt)).data
        if not np.isfinite(v).all():
            raise EvaluationError("f produced a non-finite value during differencing")
        return float(v)

    worst = 0.0
    flat = x0.reshape(-1)
    for i in range(flat.size):
        bump = np.zeros_like(flat)
        bump[i] = h
        fd = (value_at((flat + bump).reshape(x0.shape)) - value_at((flat - bump).reshape(x0.shape))) / (2.0 * h)
        err = abs(analytic.reshape(-1)[i] - fd) / max(1.0, abs(fd))
        worst = max(worst, err)
    return worst
