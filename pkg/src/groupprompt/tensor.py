"""A small reverse-mode differentiable array built on numpy.

Each :class:`Tensor` wraps a float64 array.  Operations record their parents
and a closure mapping the upstream gradient to one gradient per parent;
:meth:`Tensor.backward` walks the graph in reverse topological order.  Only
leaves keep a ``grad`` buffer and it accumulates (``+=``) until
:func:`zero_grad` clears it.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

from .errors import NumericError, ParameterError, ShapeError
from .rng import Rng

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Build no graph inside the block (inference only)."""
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    __slots__ = ("value", "grad", "requires_grad", "trainable", "frozen",
                 "name", "_parents", "_backward", "__weakref__")

    def __init__(self, value, requires_grad: bool = False, trainable: bool = False,
                 frozen: bool = False, name: str | None = None):
        self.value = np.array(value, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.trainable = bool(trainable)
        self.frozen = bool(frozen)
        self.name = name
        self.grad = np.zeros_like(self.value) if self.requires_grad else None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    # -- bookkeeping -------------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def size(self) -> int:
        return self.value.size

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.value

    def item(self) -> float:
        return float(self.value)

    def detach(self) -> "Tensor":
        return Tensor(self.value)

    def backward(self, grad: np.ndarray | None = None) -> None:
        if not self.requires_grad:
            raise ParameterError("backward() on a tensor that does not require grad")
        if grad is None:
            if self.size != 1:
                raise ShapeError(f"backward() without a seed needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.value)
        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.grad is not None:
                    node.grad += g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- operator sugar ----------------------------------------------------
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
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __getitem__(self, index):
        return index_select(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

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


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(value: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.value = value
    out.grad = None
    out.trainable = False
    out.frozen = False
    out.name = None
    out._parents = ()
    out._backward = None
    out.requires_grad = False
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        if p.grad is not None:
            p.grad[...] = 0.0


# -- elementwise -----------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(g, b.shape) if b.requires_grad else None)

    return _result(a.value + b.value, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(-g, b.shape) if b.requires_grad else None)

    return _result(a.value - b.value, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return (_unbroadcast(g * b.value, a.shape) if a.requires_grad else None,
                _unbroadcast(g * a.value, b.shape) if b.requires_grad else None)

    return _result(a.value * b.value, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.value / b.value

    def backward(g):
        return (_unbroadcast(g / b.value, a.shape) if a.requires_grad else None,
                _unbroadcast(-g * out / b.value, b.shape) if b.requires_grad else None)

    return _result(out, (a, b), backward)


def scale(a: Tensor, factor: float) -> Tensor:
    factor = float(factor)
    return _result(a.value * factor, (a,), lambda g: (g * factor,))


def power(a: Tensor, exponent: float) -> Tensor:
    exponent = float(exponent)

    def backward(g):
        return (g * exponent * a.value ** (exponent - 1.0),)

    return _result(a.value ** exponent, (a,), backward)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.value)
    return _result(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    if np.any(a.value <= 0):
        raise NumericError("log of a non-positive value")
    return _result(np.log(a.value), (a,), lambda g: (g / a.value,))


def relu(a: Tensor) -> Tensor:
    mask = a.value > 0
    return _result(np.where(mask, a.value, 0.0), (a,), lambda g: (g * mask,))


_SQRT_HALF = np.sqrt(0.5)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(a: Tensor) -> Tensor:
    """Exact (erf) GELU."""
    x = a.value
    cdf = 0.5 * (1.0 + erf(x * _SQRT_HALF))

    def backward(g):
        return (g * (cdf + x * _INV_SQRT_2PI * np.exp(-0.5 * x * x)),)

    return _result(x * cdf, (a,), backward)


def clamp(a: Tensor, low: float | None = None, high: float | None = None) -> Tensor:
    """Clip to [low, high]; gradient passes only where the input is inside."""
    lo = -np.inf if low is None else low
    hi = np.inf if high is None else high
    x = a.value
    inside = (x >= lo) & (x <= hi)
    return _result(np.clip(x, lo, hi), (a,), lambda g: (g * inside,))


def stop_gradient(a: Tensor) -> Tensor:
    """Identity forward, zero backward."""
    return _result(a.value.copy(), (a,), lambda g: (None,))


def one_hot_argmax(a, axis: int = -1) -> Tensor:
    """Constant one-hot of the argmax along ``axis``; ties go to the lowest index."""
    x = a.value if isinstance(a, Tensor) else np.asarray(a, dtype=np.float64)
    idx = np.expand_dims(np.argmax(x, axis=axis), axis)
    out = np.zeros_like(x)
    np.put_along_axis(out, idx, 1.0, axis=axis)
    return Tensor(out)


def where(mask: np.ndarray, a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    mask = np.asarray(mask, dtype=bool)

    def backward(g):
        return (_unbroadcast(np.where(mask, g, 0.0), a.shape) if a.requires_grad else None,
                _unbroadcast(np.where(mask, 0.0, g), b.shape) if b.requires_grad else None)

    return _result(np.where(mask, a.value, b.value), (a, b), backward)


# -- reductions and shape --------------------------------------------------
def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.value.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(np.asarray(out), (a,), backward)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([a.shape[i] for i in axes]))
    return scale(sum_(a, axis, keepdims), 1.0 / count)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    return _result(a.value.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _result(a.value.transpose(axes), (a,), lambda g: (g.transpose(inverse),))


def swapaxes(a: Tensor, i: int, j: int) -> Tensor:
    axes = list(range(a.ndim))
    axes[i], axes[j] = axes[j], axes[i]
    return transpose(a, axes)


def broadcast_to(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    return _result(np.broadcast_to(a.value, shape).copy(), (a,),
                   lambda g: (_unbroadcast(g, a.shape),))


def index_select(a: Tensor, index) -> Tensor:
    """``a[index]`` for basic or integer-array indices."""
    out = a.value[index]

    def backward(g):
        full = np.zeros_like(a.value)
        np.add.at(full, index, g)
        return (full,)

    return _result(np.array(out), (a,), backward)


def take_rows(a: Tensor, rows: np.ndarray) -> Tensor:
    """Gather along axis 0 with an integer array (faster than ``a[rows]``)."""
    rows = np.asarray(rows, dtype=np.intp)

    def backward(g):
        full = np.zeros_like(a.value)
        np.add.at(full, rows, g)
        return (full,)

    return _result(a.value[rows], (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    axis = axis % tensors[0].ndim
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        parts = []
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if not t.requires_grad:
                parts.append(None)
                continue
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            parts.append(g[tuple(sl)])
        return tuple(parts)

    return _result(np.concatenate([t.value for t in tensors], axis=axis), tensors, backward)


def split(a: Tensor, sizes: Sequence[int], axis: int = 0) -> list[Tensor]:
    if sum(sizes) != a.shape[axis]:
        raise ShapeError(f"split sizes {list(sizes)} do not cover extent {a.shape[axis]}")
    out = []
    start = 0
    for n in sizes:
        sl = [slice(None)] * a.ndim
        sl[axis] = slice(start, start + n)
        out.append(index_select(a, tuple(sl)))
        start += n
    return out


# -- linear algebra --------------------------------------------------------
def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shapes {a.shape} and {b.shape} are incompatible")
    av, bv = a.value, b.value

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(bv, -1, -2), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(av, -1, -2) @ g, b.shape)
        return ga, gb

    return _result(av @ bv, (a, b), backward)


# -- normalisation ---------------------------------------------------------
def softmax(a: Tensor, axis: int = -1, temperature: float = 1.0) -> Tensor:
    if not temperature > 0:
        raise ParameterError(f"softmax temperature must be positive, got {temperature}")
    z = a.value / temperature
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - inner) / temperature,)

    return _result(out, (a,), backward)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.value - a.value.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    prob = np.exp(out)

    def backward(g):
        return (g - prob * g.sum(axis=axis, keepdims=True),)

    return _result(out, (a,), backward)


def layer_norm(a: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis (no affine part)."""
    x = a.value
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv

    def backward(g):
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g * xhat).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - xhat * gx),)

    return _result(xhat, (a,), backward)


# -- randomness ------------------------------------------------------------
def gumbel_sample(shape, rng: Rng) -> Tensor:
    """Standard Gumbel(0, 1) draws, ``-log(-log(u))``; carries no gradient."""
    u = rng.open_uniform(tuple(shape))
    return Tensor(gumbel_from_uniform(u))


def gumbel_from_uniform(u) -> np.ndarray:
    return -np.log(-np.log(np.asarray(u, dtype=np.float64)))


# -- verification ----------------------------------------------------------
def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5,
               indices: Sequence[int] | None = None) -> float:
    """Max relative error between backprop and central differences.

    ``f`` maps ``x`` to a scalar tensor and must be deterministic.  ``indices``
    restricts the comparison to those flat positions of ``x``.
    """
    if not x.requires_grad:
        raise ParameterError("grad_check needs x.requires_grad")
    x.grad[...] = 0.0
    out = f(x)
    if not np.all(np.isfinite(out.value)):
        raise NumericError("grad_check: f returned a non-finite value")
    out.backward()
    analytic = x.grad.ravel().copy()
    flat = x.value.reshape(-1)
    positions = range(flat.size) if indices is None else indices
    worst = 0.0
    with no_grad():
        for i in positions:
            orig = flat[i]
            flat[i] = orig + eps
            hi = float(f(x).value)
            flat[i] = orig - eps
            lo = float(f(x).value)
            flat[i] = orig
            if not (np.isfinite(hi) and np.isfinite(lo)):
                raise NumericError("grad_check: f returned a non-finite value")
            numeric = (hi - lo) / (2.0 * eps)
            a = analytic[i]
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, err)
    x.grad[...] = 0.0
    return worst


def roll(a: Tensor, shifts: tuple[int, ...], axes: tuple[int, ...]) -> Tensor:
    neg = tuple(-s for s in shifts)
    return _result(np.roll(a.value, shifts, axes), (a,), lambda g: (np.roll(g, neg, axes),))
