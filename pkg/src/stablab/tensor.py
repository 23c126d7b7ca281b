"""Dense tensors with define-by-run reverse-mode differentiation.

A :class:`Tensor` wraps a numpy array (float32 unless a float64 array is passed
in) and, while gradient recording is enabled, remembers the operation that
produced it. Calling :meth:`Tensor.backward` on a scalar walks the recorded
graph in reverse topological order and accumulates ``.grad`` on every tensor
that requires it. The graph is discarded with the tensors; each training step
builds a fresh one.
"""

from __future__ import annotations

import contextlib
import itertools
import math
from typing import Callable, Sequence

import numpy as np

from stablab import kernels

_grad_enabled = True
_node_ids = itertools.count()


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (evaluation passes)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _as_array(data, dtype=None):
    if isinstance(data, (np.ndarray, np.generic)) and dtype is None:
        if data.dtype in (np.float32, np.float64):
            return np.asarray(data)
        return np.asarray(data, dtype=np.float32)
    return np.asarray(data, dtype=dtype or np.float32)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "tape_id", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        self.data = _as_array(data, dtype)
        self.grad = None
        self.requires_grad = requires_grad
        self.tape_id = None
        self._parents = ()
        self._backward = None
        self.name = name

    # -- basics -----------------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def __repr__(self):
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label})"

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data)

    # -- autodiff ---------------------------------------------------------
    def backward(self, grad=None):
        """Backpropagate from this tensor (a scalar unless ``grad`` is given)."""
        if grad is None:
            if self.data.size != 1:
                raise DimensionError("backward() without grad requires a scalar tensor")
            grad = np.ones_like(self.data)
        order = _topological_order(self)
        self.grad = np.array(grad, dtype=self.dtype, copy=True).reshape(self.shape)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operator sugar ---------------------------------------------------
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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def swapaxes(self, a, b):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return transpose(self, tuple(axes))


def _topological_order(root):
    order, seen = [], set()
    stack = [(root, False)]
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


def tensor(data, requires_grad=False, name=None, dtype=None):
    return Tensor(data, requires_grad=requires_grad, name=name, dtype=dtype)


def _lift(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype or np.float32))


def record(data, parents: Sequence[Tensor], backward: Callable[[np.ndarray], None]):
    """Wrap ``data`` as the output of an operation on ``parents``.

    ``backward`` receives the output gradient and must call :func:`accumulate`
    for each parent it differentiates. Nothing is recorded under
    :func:`no_grad` or when no parent requires a gradient.
    """
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.tape_id = next(_node_ids)
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g, shape):
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def accumulate(t: Tensor, g):
    if not t.requires_grad:
        return
    g = _unbroadcast(np.asarray(g), t.shape)
    if t.grad is None:
        t.grad = np.array(g, dtype=t.dtype, copy=True)
    else:
        t.grad = t.grad + g.astype(t.dtype, copy=False)


# -- elementwise ------------------------------------------------------------
def add(a, b):
    a, b = _lift(a, b if isinstance(b, Tensor) else None), _lift(b, a if isinstance(a, Tensor) else None)

    def backward(g):
        accumulate(a, g)
        accumulate(b, g)

    return record(a.data + b.data, (a, b), backward)


def sub(a, b):
    a, b = _lift(a, b if isinstance(b, Tensor) else None), _lift(b, a if isinstance(a, Tensor) else None)

    def backward(g):
        accumulate(a, g)
        accumulate(b, -g)

    return record(a.data - b.data, (a, b), backward)


def mul(a, b):
    a, b = _lift(a, b if isinstance(b, Tensor) else None), _lift(b, a if isinstance(a, Tensor) else None)

    def backward(g):
        if a.requires_grad:
            accumulate(a, g * b.data)
        if b.requires_grad:
            accumulate(b, g * a.data)

    return record(a.data * b.data, (a, b), backward)


def div(a, b):
    a, b = _lift(a, b if isinstance(b, Tensor) else None), _lift(b, a if isinstance(a, Tensor) else None)
    out = a.data / b.data

    def backward(g):
        if a.requires_grad:
            accumulate(a, g / b.data)
        if b.requires_grad:
            accumulate(b, -g * out / b.data)

    return record(out, (a, b), backward)


def tanh(x):
    y = np.tanh(x.data)

    def backward(g):
        accumulate(x, g * (1.0 - y * y))

    return record(y, (x,), backward)


def exp(x):
    y = np.exp(x.data)

    def backward(g):
        accumulate(x, g * y)

    return record(y, (x,), backward)


def identity(x):
    """A fresh node with the same value; its ``.grad`` isolates one consumer."""

    def backward(g):
        accumulate(x, g)

    return record(x.data, (x,), backward)


def squared_relu(x):
    """``max(x, 0) ** 2`` elementwise."""
    r = np.maximum(x.data, 0)

    def backward(g):
        accumulate(x, g * 2 * r)

    return record(r * r, (x,), backward)


def clip(x, lo, hi):
    """Clamp to ``[lo, hi]``; clamped entries pass no gradient."""
    y = np.clip(x.data, lo, hi)

    def backward(g):
        inside = (x.data > lo) & (x.data < hi)
        accumulate(x, g * inside)

    return record(y, (x,), backward)


# -- reductions and shape ---------------------------------------------------
def tsum(x, axis=None, keepdims=False):
    y = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        accumulate(x, np.broadcast_to(g, x.shape))

    return record(np.asarray(y, dtype=x.dtype), (x,), backward)


def mean(x, axis=None, keepdims=False):
    n = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(tsum(x, axis, keepdims), 1.0 / n)


def reshape(x, shape):
    y = x.data.reshape(shape)

    def backward(g):
        accumulate(x, g.reshape(x.shape))

    return record(y, (x,), backward)


def transpose(x, axes=None):
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))

    def backward(g):
        accumulate(x, g.transpose(inv))

    return record(x.data.transpose(axes), (x,), backward)


def getitem(x, idx):
    y = x.data[idx]

    def backward(g):
        full = np.zeros_like(x.data)
        full[idx] = g
        accumulate(x, full)

    return record(np.array(y, copy=True), (x,), backward)


# -- linear algebra ---------------------------------------------------------
def matmul(a, b):
    """Matrix product over the last two axes (leading axes broadcast)."""
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs >=2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} @ {b.shape}")

    def backward(g):
        if a.requires_grad:
            accumulate(a, g @ np.swapaxes(b.data, -1, -2))
        if b.requires_grad:
            accumulate(b, np.swapaxes(a.data, -1, -2) @ g)

    return record(a.data @ b.data, (a, b), backward)


def linear(x, w):
    """``x @ w.T`` for ``w`` of shape (out, in); leading axes of ``x`` are flattened."""
    if x.shape[-1] != w.shape[1]:
        raise DimensionError(f"linear: input width {x.shape[-1]} != weight in-features {w.shape[1]}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, w.shape[1])
    y = (x2 @ w.data.T).reshape(*lead, w.shape[0])

    def backward(g):
        g2 = g.reshape(-1, w.shape[0])
        if x.requires_grad:
            accumulate(x, (g2 @ w.data).reshape(x.shape))
        if w.requires_grad:
            accumulate(w, g2.T @ x2)

    return record(y, (x, w), backward)


# -- fused row-wise ops -----------------------------------------------------
def _rows(a):
    return np.ascontiguousarray(a.reshape(-1, a.shape[-1]))


def softmax(x):
    """Softmax over the last axis, max-subtracted."""
    p = kernels.softmax_rows(_rows(x.data)).reshape(x.shape)

    def backward(g):
        dx = kernels.softmax_rows_backward(_rows(p), _rows(g.astype(p.dtype, copy=False)))
        accumulate(x, dx.reshape(x.shape))

    return record(p, (x,), backward)


def layer_norm(x, gain, bias, eps=1e-5):
    """Normalize the last axis to zero mean / unit variance, then ``gain * . + bias``."""
    d = x.shape[-1]
    if d < 2:
        raise DimensionError("layer_norm needs at least 2 features")
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm affine params must have shape ({d},)")
    dt = x.dtype
    y, xhat, rstd = kernels.layer_norm_rows(
        _rows(x.data),
        np.ascontiguousarray(gain.data, dtype=dt),
        np.ascontiguousarray(bias.data, dtype=dt),
        float(eps),
    )

    def backward(g):
        dx, dgain, dbias = kernels.layer_norm_rows_backward(
            _rows(g.astype(dt, copy=False)), xhat, rstd, np.ascontiguousarray(gain.data, dtype=dt)
        )
        accumulate(x, dx.reshape(x.shape))
        accumulate(gain, dgain)
        accumulate(bias, dbias)

    return record(y.reshape(x.shape), (x, gain, bias), backward)


def cross_entropy(logits, targets, reduction="mean"):
    """Cross-entropy of ``logits`` (..., V) against integer ``targets`` (...)."""
    targets = np.asarray(targets)
    if targets.shape != logits.shape[:-1]:
        raise DimensionError(f"targets {targets.shape} do not match logits {logits.shape}")
    v = logits.shape[-1]
    logp = kernels.log_softmax_rows(_rows(logits.data))
    t = targets.reshape(-1)
    rows = np.arange(t.size)
    nll = -logp[rows, t]
    if reduction == "mean":
        out = np.asarray(nll.mean(dtype=np.float64), dtype=logits.dtype)
    elif reduction == "none":
        out = nll.reshape(targets.shape)
    else:
        raise ValueError(f"unknown reduction {reduction!r}")

    def backward(g):
        dx = np.exp(logp)
        dx[rows, t] -= 1
        if reduction == "mean":
            dx *= g / t.size
        else:
            dx *= g.reshape(-1, 1)
        accumulate(logits, dx.reshape(*targets.shape, v))

    return record(out, (logits,), backward)


def embedding(table, ids):
    """Row lookup ``table[ids]``; gradients scatter-add back into ``table``."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"token id out of range [0, {table.shape[0]})")
    y = table.data[ids]

    def backward(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        accumulate(table, full)

    return record(y, (table,), backward)


# -- numeric utilities ------------------------------------------------------
def l2_norm(x) -> float:
    """sqrt of the sum of squares over all elements, accumulated in float64."""
    arr = x.data if isinstance(x, Tensor) else np.asarray(x)
    return math.sqrt(kernels.sum_squares(arr))


COLD_START_MAX_ITERS = 10_000


def spectral_norm(w, iters=None, tol=1e-5, v0=None, return_vectors=False):
    """Largest singular value of a 2-D ``w`` by power iteration on ``w.T @ w``.

    The loop stops once the eigen-residual ``|A^T A v - sigma^2 v|`` falls
    below ``tol * sigma^2`` or after ``iters`` rounds; ``iters=None`` allows up to
    ``COLD_START_MAX_ITERS``, which a cold start on a matrix with a small
    spectral gap can need. ``v0`` warm-starts the right singular vector. A zero matrix returns 0. With ``return_vectors`` the
    result is ``(sigma, u, v)`` with ``u = w v / sigma``.
    """
    if iters is None:
        iters = COLD_START_MAX_ITERS
    if iters < 1:
        raise ValueError("iters must be >= 1")
    a = np.asarray(w.data if isinstance(w, Tensor) else w, dtype=np.float64)
    if a.ndim != 2:
        raise DimensionError("spectral_norm expects a matrix")
    m, n = a.shape
    if v0 is None:
        v = np.random.default_rng(0).standard_normal(n)
    else:
        v = np.asarray(v0, dtype=np.float64).copy()
    nv = np.linalg.norm(v)
    if not np.any(a) or nv == 0:
        zero = (0.0, np.zeros(m), np.zeros(n))
        return zero if return_vectors else 0.0
    v /= nv
    u = np.zeros(m)
    for _ in range(iters):
        u = a @ v
        s = np.linalg.norm(u)
        if s == 0.0:
            break
        u /= s
        w_v = a.T @ u  # = (A^T A v) / s
        # eigen-residual of A^T A at v, relative to sigma^2
        done = np.linalg.norm(w_v - s * v) < tol * s
        v = w_v / np.linalg.norm(w_v)
        if done:
            break
    sigma = float(np.linalg.norm(a @ v))
    if return_vectors:
        u = a @ v / sigma if sigma > 0 else u
        return sigma, u, v
    return sigma


def _scalar(v):
    return v.data if isinstance(v, Tensor) else v


def finite_diff_grad(f, x, h=1e-3):
    """Central-difference gradient of scalar ``f`` at ``x``.

    ``x`` (a Tensor or array) is perturbed in place and restored, and ``f(x)``
    is evaluated for each perturbation, so ``f`` may equally close over a
    model that holds ``x`` as a parameter. Returns a float64 array.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    arr = x.data if isinstance(x, Tensor) else x
    grad = np.zeros(arr.shape, dtype=np.float64)
    flat = arr.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(_scalar(f(x)))
        flat[i] = orig - h
        fm = float(_scalar(f(x)))
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return grad
