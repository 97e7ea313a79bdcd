"""Cross- and self-attention with the plain Q/K/V projection parameterization.

Queries, keys and values are rows.  There is no output projection: the layer
that consumes the attention output does any further mixing.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .tensor import ShapeError, Tensor, concat, matmul, scale, softmax_rows, transpose


@dataclass
class AttentionParams:
    w_q: Tensor  # [D_e, D_z]
    w_k: Tensor  # [D_e, D_c]
    w_v: Tensor  # [D_e, D_c]
    scale: Optional[float] = None
    heads: int = 1

    def __post_init__(self):
        if not (self.w_q.shape[0] == self.w_k.shape[0] == self.w_v.shape[0]):
            raise ShapeError("W_Q, W_K and W_V must share their row count (D_e); got "
                             f"{self.w_q.shape}, {self.w_k.shape}, {self.w_v.shape}")
        if self.w_q.shape[0] % self.heads:
            raise ShapeError(f"D_e={self.w_q.shape[0]} not divisible by heads={self.heads}")

    @property
    def d_e(self) -> int:
        return self.w_q.shape[0]

    @property
    def d_query(self) -> int:
        return self.w_q.shape[1]

    @property
    def d_context(self) -> int:
        return self.w_k.shape[1]

    @property
    def temperature(self) -> float:
        if self.scale is not None:
            return self.scale
        return 1.0 / math.sqrt(self.d_e // self.heads)

    def parameters(self) -> list[Tensor]:
        return [self.w_q, self.w_k, self.w_v]

    @classmethod
    def init(cls, d_e: int, d_query: int, d_context: int, rng: np.random.Generator,
             zero_value: bool = False, heads: int = 1) -> "AttentionParams":
        def w(rows, cols, zero=False):
            data = np.zeros((rows, cols)) if zero else rng.normal(0.0, 1.0 / math.sqrt(cols), (rows, cols))
            return Tensor(data, requires_grad=True)

        return cls(w(d_e, d_query), w(d_e, d_context), w(d_e, d_context, zero_value), heads=heads)


# Set by tests to capture the softmax weight matrix of the most recent call.
_weights_hook: Optional[Callable[[np.ndarray], None]] = None


def set_weights_hook(fn: Optional[Callable[[np.ndarray], None]]) -> None:
    global _weights_hook
    _weights_hook = fn


def cross_attention(z: Tensor, c: Tensor, p: AttentionParams) -> Tensor:
    """softmax(scale * Q K^T) V with Q = z W_Q^T, K = c W_K^T, V = c W_V^T.

    ``z`` is ``[..., N_q, D_z]`` and ``c`` is ``[..., N_k, D_c]``; any leading
    batch axes must match.  Returns ``[..., N_q, D_e]``.
    """
    if z.ndim < 2 or z.shape[-1] != p.d_query:
        raise ShapeError(f"query projection W_Q {p.w_q.shape} does not fit z {z.shape}")
    if c.ndim < 2 or c.shape[-1] != p.d_context:
        raise ShapeError(f"key/value projections W_K {p.w_k.shape}, W_V {p.w_v.shape} "
                         f"do not fit c {c.shape}")
    if z.shape[:-2] != c.shape[:-2]:
        raise ShapeError(f"batch axes of z {z.shape} and c {c.shape} differ")
    if z.shape[-2] < 1 or c.shape[-2] < 1:
        raise ShapeError("attention needs at least one query and one key")

    q = matmul(z, transpose(p.w_q))
    k = matmul(c, transpose(p.w_k))
    v = matmul(c, transpose(p.w_v))
    if p.heads == 1:
        return _attend(q, k, v, p.temperature)

    # split D_e into heads, attend per head, concatenate back
    dh = p.d_e // p.heads
    outs = []
    for h in range(p.heads):
        sl = (Ellipsis, slice(h * dh, (h + 1) * dh))
        outs.append(_attend(q[sl], k[sl], v[sl], p.temperature))
    return concat(outs, axis=-1)


def _attend(q: Tensor, k: Tensor, v: Tensor, temperature: float) -> Tensor:
    axes = tuple(range(k.ndim - 2)) + (k.ndim - 1, k.ndim - 2)
    scores = scale(matmul(q, transpose(k, axes)), temperature)
    weights = softmax_rows(scores)
    if _weights_hook is not None:
        _weights_hook(weights.data)
    return matmul(weights, v)


def self_attention(x: Tensor, p: AttentionParams) -> Tensor:
    if p.d_query != p.d_context:
        raise ShapeError("self_attention needs D_z == D_c")
    return cross_attention(x, x, p)
