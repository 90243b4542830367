"""Dense-tensor substrate with reverse-mode automatic differentiation.

Tensors wrap numpy arrays (float64 by default, float32 behind a config
switch) and record the operations applied to them on a tape of graph
nodes.  Calling :func:`backward` on a scalar result walks the recorded
DAG once in reverse topological order (deterministic tie-break by
creation index, so runs are bit-reproducible) and accumulates gradients
additively across fan-out.

Design notes that matter for reproducibility:

* softmax and log-softmax subtract the row maximum before
  exponentiating, so saturated logits (+-1e3 and beyond) stay finite;
* bilinear resizing uses the half-pixel ("align corners false")
  convention: source coordinate of output index ``i`` is
  ``(i + 0.5) * n_in / n_out - 0.5`` with edge clamping, and both the
  forward pass and its adjoint are plain matrix products with fixed
  interpolation weights;
* L2 normalization divides by ``max(||x||, eps)``, which makes the
  output norm exactly 1 (up to rounding) whenever ``||x|| > eps``.
"""

from __future__ import annotations

import contextlib
import itertools
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Iterable, Sequence

import numpy as np


class ContractViolation(Exception):
    """An operation was invoked outside its documented contract."""


_ids = itertools.count()
_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (forward-only evaluation)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _as_array(data, dtype=None) -> np.ndarray:
    if dtype is not None:
        return np.asarray(data, dtype=dtype)
    arr = np.asarray(data)
    if arr.dtype in (np.float32, np.float64):
        return arr
    return arr.astype(np.float64)


class Tensor:
    """A dense n-dimensional array that may participate in the gradient tape.

    ``grad`` is populated (as a numpy array of the same shape) by
    :func:`backward`; it accumulates across calls until :meth:`zero_grad`.
    """

    __slots__ = ("data", "requires_grad", "grad", "op", "parents", "_bwd", "_id")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _as_array(data, dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.op: str | None = None
        self.parents: tuple[Tensor, ...] = ()
        self._bwd: Callable | None = None
        self._id = next(_ids)

    # -- basic introspection -------------------------------------------------

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
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" op={self.op}" if self.op else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    # -- operator sugar ------------------------------------------------------

    def __add__(self, other):
        return add(self, _wrap(other, self.dtype))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _wrap(other, self.dtype))

    def __rsub__(self, other):
        return sub(_wrap(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, _wrap(other, self.dtype))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, _wrap(other, self.dtype))

    def __rtruediv__(self, other):
        return div(_wrap(other, self.dtype), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _wrap(other, self.dtype))

    def __getitem__(self, key):
        return getitem(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)


def _wrap(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def constant(x, dtype=None) -> Tensor:
    """A tensor that never requires gradients."""
    return Tensor(x, requires_grad=False, dtype=dtype)


def _make(data: np.ndarray, op: str, parents: Sequence[Tensor], bwd: Callable) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.op = op
        out.parents = tuple(parents)
        out._bwd = bwd
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcast gradient back to the original operand shape."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# -- elementwise primitives --------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    return _make(a.data + b.data, "add", (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    return _make(a.data - b.data, "sub", (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    return _make(a.data * b.data, "mul", (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape),
                            _unbroadcast(g * a.data, b.shape)))


def div(a: Tensor, b: Tensor) -> Tensor:
    return _make(a.data / b.data, "div", (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * a.data / (b.data * b.data), b.shape)))


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, "neg", (a,), lambda g: (-g,))


def relu(a: Tensor) -> Tensor:
    return _make(np.maximum(a.data, 0), "relu", (a,),
                 lambda g: (g * (a.data > 0),))


def sigmoid(a: Tensor) -> Tensor:
    # Split by sign so exp never overflows.
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return _make(out, "sigmoid", (a,), lambda g: (g * out * (1.0 - out),))


def absolute(a: Tensor) -> Tensor:
    return _make(np.abs(a.data), "abs", (a,), lambda g: (g * np.sign(a.data),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, "exp", (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return _make(np.log(a.data), "log", (a,), lambda g: (g / a.data,))


# -- reductions --------------------------------------------------------------

def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.shape).copy(),)
    return _make(a.data.sum(axis=axis, keepdims=keepdims), "sum", (a,), bwd)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.size
    elif isinstance(axis, tuple):
        n = int(np.prod([a.shape[ax] for ax in axis]))
    else:
        n = a.shape[axis]

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g / n, a.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg / n, a.shape).copy(),)
    return _make(a.data.mean(axis=axis, keepdims=keepdims), "mean", (a,), bwd)


# -- linear algebra ----------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ContractViolation(f"matmul: operands must be >=2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ContractViolation(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")

    def bwd(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return (_unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape))
    return _make(np.matmul(a.data, b.data), "matmul", (a, b), bwd)


# -- normalizations ----------------------------------------------------------

def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)
    return _make(out, "softmax", (a,), bwd)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def bwd(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)
    return _make(out, "log_softmax", (a,), bwd)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis with population variance, then scale/shift."""
    if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise ContractViolation(
            f"layer_norm: gamma/beta must have shape ({x.shape[-1]},), "
            f"got {gamma.shape} and {beta.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = ((x.data - mu) ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = xhat * gamma.data + beta.data

    def bwd(g):
        dgamma = _unbroadcast(g * xhat, gamma.shape)
        dbeta = _unbroadcast(g, beta.shape)
        dxhat = g * gamma.data
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return (dx, dgamma, dbeta)
    return _make(out, "layer_norm", (x, gamma, beta), bwd)


def l2_normalize(a: Tensor, axis: int = -1, eps: float = 1e-12) -> Tensor:
    norm = np.sqrt((a.data ** 2).sum(axis=axis, keepdims=True))
    denom = np.maximum(norm, eps)
    out = a.data / denom

    def bwd(g):
        clamped = norm <= eps
        dx = (g - out * (g * out).sum(axis=axis, keepdims=True)) / denom
        if clamped.any():
            dx = np.where(clamped, g / eps, dx)
        return (dx,)
    return _make(out, "l2_normalize", (a,), bwd)


# -- shape manipulation ------------------------------------------------------

def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    return _make(a.data.reshape(shape), "reshape", (a,),
                 lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    inv = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), "transpose", (a,),
                 lambda g: (g.transpose(inv),))


def getitem(a: Tensor, key) -> Tensor:
    def bwd(g):
        out = np.zeros_like(a.data)
        np.add.at(out, key, g)
        return (out,)
    return _make(a.data[key], "getitem", (a,), bwd)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [t for t in tensors]
    if not tensors:
        raise ContractViolation("concat: need at least one input")
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, offsets, axis=axis))
    return _make(np.concatenate([t.data for t in tensors], axis=axis),
                 "concat", tensors, bwd)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    expanded = [reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) for t in tensors]
    return concat(expanded, axis=axis)


def masked_fill(a: Tensor, mask: np.ndarray, value: float) -> Tensor:
    mask = np.asarray(mask, dtype=bool)
    out = np.where(mask, np.asarray(value, dtype=a.dtype), a.data)
    return _make(out, "masked_fill", (a,),
                 lambda g: (np.where(mask, 0.0, g),))


@lru_cache(maxsize=None)
def _bilinear_weights(n_out: int, n_in: int) -> np.ndarray:
    """Interpolation matrix W with out[i] = sum_p W[i, p] * in[p].

    Source coordinate of output index i is (i + 0.5) * n_in / n_out - 0.5;
    the two neighboring source samples are blended linearly, with indices
    clamped to the valid range at the borders.
    """
    w = np.zeros((n_out, n_in), dtype=np.float64)
    scale = n_in / n_out
    for i in range(n_out):
        src = (i + 0.5) * scale - 0.5
        lo = int(np.floor(src))
        t = src - lo
        w[i, min(max(lo, 0), n_in - 1)] += 1.0 - t
        w[i, min(max(lo + 1, 0), n_in - 1)] += t
    return w


def resize_bilinear(a: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinearly resample the trailing two axes to (out_h, out_w)."""
    if a.ndim < 2:
        raise ContractViolation(f"resize_bilinear: input must be >=2-D, got {a.shape}")
    h, w = a.shape[-2], a.shape[-1]
    wh = _bilinear_weights(out_h, h).astype(a.dtype)
    ww = _bilinear_weights(out_w, w).astype(a.dtype)
    out = np.matmul(np.matmul(wh, a.data), ww.T)

    def bwd(g):
        return (np.matmul(np.matmul(wh.T, g), ww),)
    return _make(out, "resize_bilinear", (a,), bwd)


# -- primitive registry ------------------------------------------------------

PRIMITIVES: dict[str, Callable] = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "neg": neg,
    "matmul": matmul,
    "relu": relu,
    "sigmoid": sigmoid,
    "abs": absolute,
    "exp": exp,
    "log": log,
    "sum": tsum,
    "mean": tmean,
    "softmax": softmax,
    "log_softmax": log_softmax,
    "layer_norm": layer_norm,
    "l2_normalize": l2_normalize,
    "reshape": reshape,
    "transpose": transpose,
    "getitem": getitem,
    "concat": concat,
    "masked_fill": masked_fill,
    "resize_bilinear": resize_bilinear,
}


def apply_primitive(kind: str, inputs: Sequence[Tensor], **params) -> Tensor:
    """Dispatch a primitive by name (used by the verification harness)."""
    if kind not in PRIMITIVES:
        raise ContractViolation(f"unknown primitive kind {kind!r}")
    if kind == "concat":
        return PRIMITIVES[kind](inputs, **params)
    return PRIMITIVES[kind](*inputs, **params)


# -- backward pass -----------------------------------------------------------

def backward(root: Tensor) -> None:
    """Populate ``grad`` on every reachable tensor that requires gradients.

    The root must be a scalar.  Visitation order is reverse topological,
    realized as decreasing creation index (parents are always created
    before children), so gradient accumulation order is deterministic.
    """
    if root.size != 1:
        raise ContractViolation(f"backward: root must be scalar, got shape {root.shape}")
    if not root.requires_grad:
        return

    nodes: dict[int, Tensor] = {}
    todo = [root]
    while todo:
        t = todo.pop()
        if t._id in nodes:
            continue
        nodes[t._id] = t
        for p in t.parents:
            if p.requires_grad and p._id not in nodes:
                todo.append(p)

    root.grad = np.ones_like(root.data)
    for tid in sorted(nodes, reverse=True):
        t = nodes[tid]
        if t._bwd is None or t.grad is None:
            continue
        grads = t._bwd(t.grad)
        for p, g in zip(t.parents, grads):
            if not p.requires_grad or g is None:
                continue
            if p.grad is None:
                p.grad = np.zeros_like(p.data)
            p.grad = p.grad + g


# -- gradient verification ---------------------------------------------------

def _rel_err(a: float, b: float) -> float:
    return abs(a - b) / max(1.0, abs(a), abs(b))


@dataclass
class GradCheckReport:
    """Per-parameter worst mismatch between reverse-mode and central differences."""

    max_rel_error: dict[str, float] = field(default_factory=dict)
    failures: list[tuple[str, int, float]] = field(default_factory=list)
    non_finite: list[tuple[str, int]] = field(default_factory=list)
    tol: float = 0.0

    @property
    def ok(self) -> bool:
        return not self.failures

    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)


def grad_check(f: Callable[..., Tensor], params: dict[str, Tensor],
               h: float = 1e-4, tol: float = 1e-4) -> GradCheckReport:
    """Compare reverse-mode gradients of ``f(params)`` to central differences.

    ``f`` must map the parameter dict to a scalar tensor.  Relative error
    is ``|a - b| / max(1, |a|, |b|)``; coordinates where a perturbed
    evaluation is non-finite are recorded and skipped rather than fatal.
    """
    for t in params.values():
        t.zero_grad()
    out = f(params)
    backward(out)
    analytic = {k: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data))
                for k, t in params.items()}

    report = GradCheckReport(tol=tol)
    with no_grad():
        for name, t in params.items():
            worst = 0.0
            flat = t.data.reshape(-1)
            gflat = analytic[name].reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                fp = f(params).item()
                flat[i] = orig - h
                fm = f(params).item()
                flat[i] = orig
                if not (np.isfinite(fp) and np.isfinite(fm)):
                    report.non_finite.append((name, i))
                    continue
                num = (fp - fm) / (2.0 * h)
                err = _rel_err(gflat[i], num)
                worst = max(worst, err)
                if err > tol:
                    report.failures.append((name, i, err))
            report.max_rel_error[name] = worst
    return report
