"""Dense float64 tensors with tape-based reverse-mode autodiff.

Every differentiable op records its parents and a closure mapping the output
gradient to parent gradients.  ``backward`` walks the recorded graph in
reverse topological order.  Broadcasting is never implicit: the only
exceptions are the spatial-mask case of :func:`hadamard` and the explicit
:func:`broadcast_to` op.
"""
from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

DTYPE = np.float64

_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (per thread)."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None

    # -- construction helpers -------------------------------------------------
    @classmethod
    def _wrap(cls, data: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = data
        t.requires_grad = False
        t.grad = None
        t._parents = ()
        t._backward = None
        return t

    @staticmethod
    def zeros(shape, requires_grad=False) -> "Tensor":
        return Tensor(np.zeros(shape), requires_grad)

    @staticmethod
    def ones(shape, requires_grad=False) -> "Tensor":
        return Tensor(np.ones(shape), requires_grad)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- operators --------------------------------------------------------------
    def __add__(self, other):
        return add(self, _lift(other, self))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _lift(other, self))

    def __rsub__(self, other):
        return sub(_lift(other, self), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return hadamard(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / float(other))
        return div(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)

    def sum(self, axis=None):
        return tensor_sum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    # -- autodiff -----------------------------------------------------------------
    def backward(self) -> None:
        backward(self)


def _lift(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor._wrap(np.full(like.shape, float(x)))


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Sequence[Tensor], grad_fn: Callable) -> Tensor:
    """Wrap ``data``; record the node only if some parent needs a gradient."""
    out = Tensor._wrap(data)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = grad_fn
    return out


def make_op(data: np.ndarray, parents: Sequence[Tensor], grad_fn: Callable) -> Tensor:
    """Public hook for ops defined outside this module.

    ``grad_fn(g)`` must return one gradient (or None) per parent.
    """
    return _result(np.asarray(data, dtype=DTYPE), parents, grad_fn)


def backward(loss: Tensor) -> None:
    if loss.data.size != 1 or loss.data.ndim > 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for p, pg in zip(node._parents, node._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return _result(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return _result(a.data - b.data, (a, b), lambda g: (g, -g))


def add_n(xs: Sequence[Tensor]) -> Tensor:
    for x in xs[1:]:
        _same_shape(xs[0], x, "add_n")
    data = xs[0].data.copy()
    for x in xs[1:]:
        data += x.data
    return _result(data, tuple(xs), lambda g: tuple(g for _ in xs))


def scale(a: Tensor, c: float) -> Tensor:
    return _result(a.data * c, (a,), lambda g: (g * c,))


def hadamard(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product.

    ``b`` may also be a 2-D spatial mask matching the last two axes of ``a``;
    it is then applied to every channel (and every leading index).
    """
    if a.shape == b.shape:
        return _result(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))
    if b.ndim == 2 and a.ndim > 2 and a.shape[-2:] == b.shape:
        lead = tuple(range(a.ndim - 2))

        def grad_fn(g):
            return g * b.data, (g * a.data).sum(axis=lead)

        return _result(a.data * b.data, (a, b), grad_fn)
    raise ShapeError(f"hadamard: incompatible shapes {a.shape} and {b.shape}")


def div(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "div")
    out = a.data / b.data
    return _result(out, (a, b), lambda g: (g / b.data, -g * out / b.data))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _result(out, (a,), lambda g: (g * 0.5 / out,))


def relu(a: Tensor) -> Tensor:
    pos = a.data > 0
    return _result(np.where(pos, a.data, 0.0), (a,), lambda g: (g * pos,))


def silu(a: Tensor) -> Tensor:
    s = 1.0 / (1.0 + np.exp(-a.data))
    return _result(a.data * s, (a,), lambda g: (g * (s * (1.0 + a.data * (1.0 - s))),))


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    inside = (a.data >= lo) & (a.data <= hi)
    return _result(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


# ---------------------------------------------------------------------------
# shape manipulation
# ---------------------------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    old = a.shape
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _result(np.ascontiguousarray(a.data.transpose(axes)), (a,),
                   lambda g: (g.transpose(inv),))


def index(a: Tensor, idx) -> Tensor:
    shape = a.shape

    def grad_fn(g):
        full = np.zeros(shape)
        if _is_fancy(idx):
            np.add.at(full, idx, g)
        else:
            full[idx] = g
        return (full,)

    return _result(np.array(a.data[idx]), (a,), grad_fn)


def _is_fancy(idx) -> bool:
    parts = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(p, (list, np.ndarray)) for p in parts)


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    axis = axis % xs[0].ndim
    sizes = [x.shape[axis] for x in xs]
    splits = np.cumsum(sizes)[:-1]
    return _result(np.concatenate([x.data for x in xs], axis=axis), tuple(xs),
                   lambda g: tuple(np.split(g, splits, axis=axis)))


def broadcast_to(a: Tensor, shape) -> Tensor:
    """Explicit broadcast following numpy rules; the gradient sums back."""
    shape = tuple(shape)
    src = a.shape
    lead = len(shape) - len(src)

    def grad_fn(g):
        g = g.sum(axis=tuple(range(lead))) if lead else g
        axes = tuple(i for i, s in enumerate(src) if s == 1 and g.shape[i] != 1)
        if axes:
            g = g.sum(axis=axes, keepdims=True)
        return (g,)

    return _result(np.broadcast_to(a.data, shape).copy(), (a,), grad_fn)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def tensor_sum(a: Tensor, axis=None) -> Tensor:
    shape = a.shape

    def grad_fn(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _result(np.asarray(a.data.sum(axis=axis)), (a,), grad_fn)


def mean(a: Tensor, axis=None) -> Tensor:
    n = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(tensor_sum(a, axis), 1.0 / float(n))


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of ``a [..., m, k]`` and ``b [k, n]`` or ``b [..., k, n]``.

    With leading batch axes, both operands must share them exactly (or ``b``
    is a single matrix shared across the batch).
    """
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner extents differ for {a.shape} x {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch extents differ for {a.shape} x {b.shape}")
    if b.ndim == 2 and a.ndim > 2:
        def grad_fn(g):
            ga = g @ b.data.T
            gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            return ga, gb
    else:
        def grad_fn(g):
            return g @ np.swapaxes(b.data, -1, -2), np.swapaxes(a.data, -1, -2) @ g
    return _result(a.data @ b.data, (a, b), grad_fn)


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the last axis, stabilized by subtracting the row max."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def grad_fn(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _result(s, (x,), grad_fn)


# ---------------------------------------------------------------------------
# parameter blocks
# ---------------------------------------------------------------------------

@dataclass
class LinearParams:
    weight: Tensor  # [out_dim, in_dim]
    bias: Optional[Tensor] = None  # [out_dim]

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]

    def parameters(self) -> list[Tensor]:
        return [self.weight] + ([self.bias] if self.bias is not None else [])


@dataclass
class Conv1x1Params:
    weight: Tensor  # [out_channels, in_channels]
    bias: Tensor  # [out_channels]
    zero_init: bool = False

    @classmethod
    def zeros(cls, out_channels: int, in_channels: int) -> "Conv1x1Params":
        return cls(Tensor.zeros((out_channels, in_channels), requires_grad=True),
                   Tensor.zeros((out_channels,), requires_grad=True), zero_init=True)

    def parameters(self) -> list[Tensor]:
        return [self.weight, self.bias]


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    """Add ``bias [d]`` along the last axis of ``x [..., d]``."""
    if bias.ndim != 1 or x.shape[-1] != bias.shape[0]:
        raise ShapeError(f"add_bias: bias {bias.shape} does not fit {x.shape}")
    lead = tuple(range(x.ndim - 1))
    return _result(x.data + bias.data, (x, bias), lambda g: (g, g.sum(axis=lead)))


def linear_forward(p: LinearParams, x: Tensor) -> Tensor:
    if x.shape[-1] != p.in_dim:
        raise ShapeError(f"linear: input width {x.shape[-1]} != weight in_dim {p.in_dim}")
    y = matmul(x, transpose(p.weight))
    return add_bias(y, p.bias) if p.bias is not None else y


def conv1x1_forward(p: Conv1x1Params, x: Tensor) -> Tensor:
    """Per-pixel channel mixing of ``x [..., C, H, W]``."""
    if x.ndim < 3 or x.shape[-3] != p.weight.shape[1]:
        raise ShapeError(f"conv1x1: input {x.shape} has wrong channel count for "
                         f"weight {p.weight.shape}")
    c, h, w = x.shape[-3:]
    lead = x.shape[:-3]
    flat = reshape(x, lead + (c, h * w))
    y = matmul(p.weight, flat) if not lead else _left_matmul(p.weight, flat)
    bias = reshape(p.bias, (p.bias.shape[0], 1))
    y = add(y, broadcast_to(bias, y.shape))
    return reshape(y, lead + (p.weight.shape[0], h, w))


def _left_matmul(w: Tensor, x: Tensor) -> Tensor:
    """``w [o, c]`` applied to every ``x[..., c, n]``."""
    out = np.einsum("oc,...cn->...on", w.data, x.data)

    def grad_fn(g):
        gw = np.einsum("...on,...cn->oc", g, x.data)
        gx = np.einsum("oc,...on->...cn", w.data, g)
        return gw, gx

    return _result(out, (w, x), grad_fn)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

def check_gradients(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5,
                    coords: Optional[int] = None, rng=None) -> float:
    """Max relative error between autodiff and central differences.

    The error per coordinate is ``|a - n| / max(1, |a|, |n|)``.  ``coords``
    limits the check to that many randomly chosen coordinates.
    """
    x.requires_grad = True
    x.grad = None
    out = f(x)
    backward(out)
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()
    x.grad = None

    flat = x.data.reshape(-1)
    if coords is None or coords >= flat.size:
        picks = np.arange(flat.size)
    else:
        rng = rng if rng is not None else np.random.default_rng(0)
        picks = rng.choice(flat.size, size=coords, replace=False)
    worst = 0.0
    with no_grad():
        for i in picks:
            orig = flat[i]
            flat[i] = orig + eps
            hi = f(x).item()
            flat[i] = orig - eps
            lo = f(x).item()
            flat[i] = orig
            num = (hi - lo) / (2 * eps)
            a = analytic.reshape(-1)[i]
            err = abs(a - num) / max(1.0, abs(a), abs(num))
            worst = max(worst, err)
    return worst
