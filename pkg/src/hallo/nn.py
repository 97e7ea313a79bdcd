"""Convolution and embedding blocks shared by the autoencoder and the UNet."""
from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ShapeError, Tensor, make_op


def _im2col(x: np.ndarray, stride: int) -> np.ndarray:
    """``[N, C, H, W]`` to ``[N * Ho * Wo, C * 9]`` patches with zero padding 1."""
    n, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    win = sliding_window_view(xp, (3, 3), axis=(2, 3))[:, :, ::stride, ::stride]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * (h // stride) * (w // stride), c * 9)


def conv3x3(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1) -> Tensor:
    """3x3 convolution with zero padding 1 on ``x [N, C, H, W]``.

    ``weight`` is ``[O, C, 3, 3]``.  Implemented as im2col + one matmul.  The
    input gradient is itself a stride-1 convolution of the (zero-dilated, for
    stride 2) output gradient with the flipped, transposed kernel.
    """
    if x.ndim != 4 or weight.ndim != 4 or weight.shape[2:] != (3, 3):
        raise ShapeError(f"conv3x3: bad shapes x {x.shape}, weight {weight.shape}")
    n, c, h, w = x.shape
    o = weight.shape[0]
    if weight.shape[1] != c:
        raise ShapeError(f"conv3x3: input has {c} channels, weight expects {weight.shape[1]}")
    if stride not in (1, 2) or h % stride or w % stride:
        raise ShapeError(f"conv3x3: stride {stride} does not divide {h}x{w}")
    ho, wo = h // stride, w // stride

    cols = _im2col(x.data, stride)
    wm = weight.data.reshape(o, c * 9)
    out = (cols @ wm.T + bias.data).reshape(n, ho, wo, o).transpose(0, 3, 1, 2)

    def grad_fn(g):
        gt = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, o)
        gw = (gt.T @ cols).reshape(weight.shape) if weight.requires_grad else None
        gb = gt.sum(axis=0) if bias.requires_grad else None
        gx = None
        if x.requires_grad:
            if stride == 2:
                gd = np.zeros((n, o, h, w))
                gd[:, :, ::2, ::2] = g
            else:
                gd = g
            wf = weight.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(c, o * 9)
            gx = (_im2col(gd, 1) @ wf.T).reshape(n, h, w, c).transpose(0, 3, 1, 2)
        return gx, gw, gb

    return make_op(np.ascontiguousarray(out), (x, weight, bias), grad_fn)


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbour 2x upsampling of ``x [..., H, W]``."""
    out = x.data.repeat(2, axis=-2).repeat(2, axis=-1)
    h, w = x.shape[-2:]

    def grad_fn(g):
        return (g.reshape(g.shape[:-2] + (h, 2, w, 2)).sum(axis=(-3, -1)),)

    return make_op(out, (x,), grad_fn)


def avgpool(x: Tensor, factor: int) -> Tensor:
    """Average pooling of ``x [..., H, W]`` by ``factor``."""
    h, w = x.shape[-2:]
    if h % factor or w % factor:
        raise ShapeError(f"avgpool: {h}x{w} not divisible by {factor}")
    lead = x.shape[:-2]
    out = x.data.reshape(lead + (h // factor, factor, w // factor, factor)).mean(axis=(-3, -1))

    def grad_fn(g):
        g = g.repeat(factor, axis=-2).repeat(factor, axis=-1)
        return (g / (factor * factor),)

    return make_op(out, (x,), grad_fn)


def sinusoidal_embedding(positions, dim: int) -> np.ndarray:
    """``[len(positions), dim]`` sin/cos features with geometric frequencies.

    An odd ``dim`` gets a trailing zero column.
    """
    pos = np.asarray(positions, dtype=np.float64).reshape(-1, 1)
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / max(half, 1))
    ang = pos * freqs
    pad = np.zeros((pos.shape[0], dim - 2 * half))
    return np.concatenate([np.sin(ang), np.cos(ang), pad], axis=1)


def conv_init(rng: np.random.Generator, out_c: int, in_c: int, gain: float = 1.0) -> np.ndarray:
    return rng.normal(0.0, gain / math.sqrt(in_c * 9), (out_c, in_c, 3, 3))


def linear_init(rng: np.random.Generator, out_d: int, in_d: int, gain: float = 1.0) -> np.ndarray:
    return rng.normal(0.0, gain / math.sqrt(in_d), (out_d, in_d))


class ParamStore:
    """Flat, ordered mapping from dotted names to trainable tensors."""

    def __init__(self):
        self._p: dict[str, Tensor] = {}

    def add(self, name: str, data) -> Tensor:
        if name in self._p:
            raise KeyError(f"duplicate parameter '{name}'")
        t = Tensor(data, requires_grad=True)
        self._p[name] = t
        return t

    def adopt(self, other: "ParamStore") -> None:
        """Share every tensor of ``other`` under its existing name."""
        for name, t in other.items():
            if name in self._p:
                raise KeyError(f"duplicate parameter '{name}'")
            self._p[name] = t

    def __getitem__(self, name: str) -> Tensor:
        return self._p[name]

    def __contains__(self, name: str) -> bool:
        return name in self._p

    def __len__(self) -> int:
        return len(self._p)

    def items(self):
        return self._p.items()

    def names(self, prefixes=None) -> list[str]:
        if prefixes is None:
            return list(self._p)
        return [n for n in self._p if any(n.startswith(p) for p in prefixes)]

    def select(self, prefixes=None) -> list[Tensor]:
        return [self._p[n] for n in self.names(prefixes)]

    def set_trainable(self, prefixes) -> None:
        """Mark exactly the parameters under ``prefixes`` as trainable."""
        for n, t in self._p.items():
            t.requires_grad = any(n.startswith(p) for p in prefixes)
            t.grad = None

    def trainable(self) -> list[tuple[str, Tensor]]:
        return [(n, t) for n, t in self._p.items() if t.requires_grad]

    def arrays(self) -> dict[str, np.ndarray]:
        return {n: t.data for n, t in self._p.items()}

    def snapshot(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self._p.items()}

    def load_arrays(self, arrays: dict, strict: bool = True) -> None:
        for n, t in self._p.items():
            if n not in arrays:
                if strict:
                    raise KeyError(f"checkpoint lacks '{n}'")
                continue
            a = np.asarray(arrays[n], dtype=np.float64)
            if a.shape != t.shape:
                raise ShapeError(f"'{n}': checkpoint shape {a.shape} != {t.shape}")
            t.data = a.copy()
