"""Small reverse-mode differentiation engine over float64 numpy arrays.

Every op builds a :class:`Tensor` holding its forward value, its parents and a
closure mapping the output gradient to one gradient per parent. Node ids grow
monotonically, so sorting reachable nodes by descending id is a valid reverse
topological order for backward.
"""

from __future__ import annotations

import itertools
import math
from typing import Callable, Sequence

import numpy as np

CLAMP_EPS = 1e-6

_ids = itertools.count()
_grad_enabled = True


class no_grad:
    """Context manager: ops record no parents or backward closures."""

    def __enter__(self):
        global _grad_enabled
        self._prev, _grad_enabled = _grad_enabled, False

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


def _as_array(x) -> np.ndarray:
    if isinstance(x, np.ndarray) and x.dtype == np.float64:
        return x
    return np.asarray(x, dtype=np.float64)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` after numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "op", "id", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 _parents: tuple = (), _backward: Callable | None = None, op: str = "leaf"):
        data = _as_array(data)
        # a finite sum implies finite entries; only fall back to the full scan otherwise
        if not math.isfinite(data.sum()) and not np.isfinite(data).all():
            raise NonFiniteError(f"non-finite value produced by op '{op}'")
        self.data = data
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(data) if requires_grad and not _parents else None
        self.op = op
        self.name = name
        self.id = next(_ids)
        self._parents = _parents
        self._backward = _backward

    # -- construction helpers -------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(op={self.op}, shape={self.shape})"

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0.0

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    # -- backward -------------------------------------------------------
    def backward(self, grad=None) -> None:
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``.grad``."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
        nodes = {}
        stack = [self]
        while stack:
            t = stack.pop()
            if t.id in nodes or not t.requires_grad:
                continue
            nodes[t.id] = t
            stack.extend(t._parents)
        grads = {self.id: _as_array(grad).reshape(self.shape)}
        for nid in sorted(nodes, reverse=True):
            t = nodes[nid]
            g = grads.pop(nid, None)
            if g is None:
                continue
            if not t._parents:
                t.grad += g
                continue
            for parent, pg in zip(t._parents, t._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if parent.id in grads:
                    grads[parent.id] = grads[parent.id] + pg
                else:
                    grads[parent.id] = pg

    # -- operators ------------------------------------------------------
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

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def tensor(x, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, requires_grad=requires_grad, name=name)


def _make(data, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    if _grad_enabled and any([p.requires_grad for p in parents]):
        return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=backward, op=op)
    return Tensor(data, op=op)


def _binary_shapes(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# -- elementwise arithmetic ---------------------------------------------

def add(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    if a.shape != b.shape:
        _binary_shapes(a, b, "add")
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    if a.shape != b.shape:
        _binary_shapes(a, b, "sub")
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    if a.shape != b.shape:
        _binary_shapes(a, b, "mul")
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
                 "mul")


def div(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    if a.shape != b.shape:
        _binary_shapes(a, b, "div")
    out = a.data / b.data
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * out / b.data, b.shape)), "div")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    return _make(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return _make(out, (x,), lambda g: (g * 0.5 / out,), "sqrt")


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return _make(out, (x,), lambda g: (g * (1.0 - out * out),), "tanh")


def cos(x: Tensor) -> Tensor:
    return _make(np.cos(x.data), (x,), lambda g: (-g * np.sin(x.data),), "cos")


def arccos(x: Tensor, eps: float = CLAMP_EPS) -> Tensor:
    """arccos of ``x`` clamped to [-1+eps, 1-eps]; zero gradient where the clamp is active."""
    x = tensor(x)
    lo, hi = -1.0 + eps, 1.0 - eps
    xc = np.clip(x.data, lo, hi)
    inside = (x.data >= lo) & (x.data <= hi)

    def back(g):
        return (np.where(inside, -g / np.sqrt(1.0 - xc * xc), 0.0),)

    return _make(np.arccos(xc), (x,), back, "arccos")


def minimum(a, b) -> Tensor:
    """Elementwise min; on ties the gradient goes to ``a``."""
    a, b = tensor(a), tensor(b)
    if a.shape != b.shape:
        _binary_shapes(a, b, "minimum")
    pick_a = a.data <= b.data
    return _make(np.where(pick_a, a.data, b.data), (a, b),
                 lambda g: (_unbroadcast(np.where(pick_a, g, 0.0), a.shape),
                            _unbroadcast(np.where(pick_a, 0.0, g), b.shape)), "minimum")


# -- reductions and shape ops -------------------------------------------

def _expand(g: np.ndarray, shape: tuple, axis, keepdims: bool) -> np.ndarray:
    if axis is not None and not keepdims:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(a % len(shape) for a in axes)
        for a in sorted(axes):
            g = np.expand_dims(g, a)
    return np.broadcast_to(g, shape)


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    return _make(x.data.sum(axis=axis, keepdims=keepdims), (x,),
                 lambda g: (np.array(_expand(g, x.shape, axis, keepdims)),), "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.mean(axis=axis, keepdims=keepdims)
    scale = out.size / x.data.size if x.data.size else 0.0
    return _make(out, (x,),
                 lambda g: (np.array(_expand(g, x.shape, axis, keepdims)) * scale,), "mean")


def reshape(x: Tensor, shape) -> Tensor:
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(range(x.ndim))[::-1]
    inv = np.argsort(axes)
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),), "transpose")


def swap_last(x: Tensor) -> Tensor:
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, tuple(axes))


def getitem(x: Tensor, idx) -> Tensor:
    def back(g):
        out = np.zeros_like(x.data)
        np.add.at(out, idx, g)
        return (out,)

    return _make(x.data[idx], (x,), back, "getitem")


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {exc}") from None
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return _make(out, ts, lambda g: tuple(np.split(g, bounds, axis=axis)), "concat")


def matmul(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = np.matmul(a.data, b.data)

    def back(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(out, (a, b), back, "matmul")


# -- softmax family -----------------------------------------------------

def logsumexp(x: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    m = x.data.max(axis=axis, keepdims=True)
    e = np.exp(x.data - m)
    s = e.sum(axis=axis, keepdims=True)
    out = np.log(s) + m
    soft = e / s
    if not keepdims:
        out = np.squeeze(out, axis=axis)

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * soft,)

    return _make(out, (x,), back, "logsumexp")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    e = np.exp(x.data - x.data.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (x,), back, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    return x - logsumexp(x, axis=axis, keepdims=True)


# -- composites used by the models ----------------------------------------

def l2_norm(x: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    if np.any((x.data * x.data).sum(axis=axis) == 0.0):
        raise ValueError("zero-norm vector has no direction")
    return sqrt(tsum(x * x, axis=axis, keepdims=keepdims))


def cosine_similarity(u: Tensor, v: Tensor, axis: int = -1) -> Tensor:
    """Cosine between ``u`` and ``v`` along ``axis`` (broadcasting over the rest)."""
    u, v = tensor(u), tensor(v)
    return tsum(u * v, axis=axis) / (l2_norm(u, axis) * l2_norm(v, axis))


def cosine_matrix(a: Tensor, b: Tensor) -> Tensor:
    """All-pairs cosine between rows of ``a`` (n, d) and rows of ``b`` (m, d)."""
    a, b = tensor(a), tensor(b)
    if a.shape[-1] != b.shape[-1]:
        raise ShapeError(f"cosine_matrix: feature dims differ ({a.shape[-1]} vs {b.shape[-1]})")
    an = a / l2_norm(a, -1, keepdims=True)
    bn = b / l2_norm(b, -1, keepdims=True)
    return an @ bn.T


def affine(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = matmul(x, w)
    return y if b is None else y + b


def self_attention(x: Tensor, wq: Tensor, wk: Tensor, wv: Tensor) -> Tensor:
    """Single-head scaled dot-product attention over the token axis of ``x`` (..., T, d)."""
    *lead, t, d = x.shape
    flat = reshape(x, (-1, d))
    k_dim = wq.shape[1]
    q = reshape(flat @ wq, (*lead, t, k_dim))
    k = reshape(flat @ wk, (*lead, t, k_dim))
    v = reshape(flat @ wv, (*lead, t, wv.shape[1]))
    scores = matmul(q, swap_last(k)) * (1.0 / math.sqrt(k_dim))
    return matmul(softmax(scores, axis=-1), v)


# -- gradient checking ------------------------------------------------------

def numeric_grad(f: Callable[[], Tensor], param: Tensor, h: float = 1e-6,
                 order: int = 2) -> np.ndarray:
    """Central differences of ``f`` w.r.t. every entry of ``param`` (perturbed in place).

    ``order`` selects the 3-, 5- or 7-point stencil (2, 4 or 6).
    """
    # weights on the symmetric differences f(x + k h) - f(x - k h)
    if order == 2:
        stencil = ((1.0, 0.5),)
    elif order == 4:
        stencil = ((1.0, 8 / 12), (2.0, -1 / 12))
    elif order == 6:
        stencil = ((1.0, 45 / 60), (2.0, -9 / 60), (3.0, 1 / 60))
    else:
        raise ValueError(f"unsupported stencil order {order}")
    out = np.zeros_like(param.data)
    flat = param.data.reshape(-1)
    gflat = out.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            acc = 0.0
            for k, c in stencil:
                flat[i] = orig + k * h
                fp = f().item()
                flat[i] = orig - k * h
                fm = f().item()
                acc += c * (fp - fm)
            flat[i] = orig
            gflat[i] = acc / h
    return out


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-6,
               order: int = 2) -> float:
    """Max over coordinates of |analytic - numeric| / max(1e-8, |analytic| + |numeric|).

    ``f`` rebuilds the graph from the current values of ``params`` on each call.
    """
    out = f()
    if out.data.size != 1:
        raise ShapeError(f"grad_check needs a scalar-valued function, got shape {out.shape}")
    for p in params:
        p.zero_grad()
    out.backward()
    worst = 0.0
    for p in params:
        analytic = p.grad.copy()
        numeric = numeric_grad(f, p, h, order)
        denom = np.maximum(1e-8, np.abs(analytic) + np.abs(numeric))
        if analytic.size:
            worst = max(worst, float(np.max(np.abs(analytic - numeric) / denom)))
    return worst
