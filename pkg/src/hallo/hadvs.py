"""Hierarchical audio-driven visual synthesis.

Audio cross-attention output ``o`` is split by the region masks into a pose
part ``b``, an expression part ``f`` and a lip part ``l``; the parts are then
fused with one of three weighting mechanisms.  Everything works in token
layout ``[..., H*W, D]`` with spatial sites as queries.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .attention import AttentionParams, cross_attention, self_attention
from .maskgen import RegionMasks
from .tensor import (Conv1x1Params, ShapeError, Tensor, add_bias, add_n, broadcast_to, concat,
                     hadamard, matmul, scale, transpose)

FUSION_MODES = ("direct_addition", "self_attention", "zero_convolution")
BRANCHES = ("full", "pose", "exp", "lip")


@dataclass
class HadvsConfig:
    fusion: str = "zero_convolution"
    region_weights: tuple[float, float, float] = (1.0, 1.0, 1.0)  # (lip, exp, pose)
    branches: tuple[str, ...] = ("pose", "exp", "lip")
    attn: Optional[AttentionParams] = None
    convs: dict[str, Conv1x1Params] = field(default_factory=dict)
    fusion_attn: Optional[AttentionParams] = None

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.fusion not in FUSION_MODES:
            raise ValueError(f"unknown fusion mode '{self.fusion}'")
        w = np.asarray(self.region_weights, dtype=float)
        if w.shape != (3,) or not np.all(np.isfinite(w)) or np.any(w < 0):
            raise ValueError(f"region weights must be three finite values >= 0, got {self.region_weights}")
        bad = [b for b in self.branches if b not in BRANCHES]
        if bad or not self.branches:
            raise ValueError(f"invalid branch set {self.branches}")
        if self.fusion == "zero_convolution" and self.convs:
            missing = [b for b in self.branches if b not in self.convs]
            if missing:
                raise ValueError(f"zero_convolution fusion lacks conv params for {missing}")

    def weight(self, branch: str) -> float:
        lip, exp, pose = self.region_weights
        return {"full": 1.0, "pose": pose, "exp": exp, "lip": lip}[branch]

    def parameters(self) -> list[Tensor]:
        ps = list(self.attn.parameters()) if self.attn is not None else []
        if self.fusion == "zero_convolution":
            for b in self.branches:
                ps += self.convs[b].parameters()
        elif self.fusion == "self_attention" and self.fusion_attn is not None:
            ps += self.fusion_attn.parameters()
        return ps

    @classmethod
    def init(cls, d_model: int, d_audio: int, rng: np.random.Generator, fusion: str = "zero_convolution",
             branches=("pose", "exp", "lip"), region_weights=(1.0, 1.0, 1.0)) -> "HadvsConfig":
        attn = AttentionParams.init(d_model, d_model, d_audio, rng)
        convs, fattn = {}, None
        if fusion == "zero_convolution":
            convs = {b: Conv1x1Params.zeros(d_model, d_model) for b in branches}
        elif fusion == "self_attention":
            fattn = AttentionParams.init(d_model, d_model, d_model, rng)
        return cls(fusion, tuple(region_weights), tuple(branches), attn, convs, fattn)

    def with_weights(self, region_weights) -> "HadvsConfig":
        return HadvsConfig(self.fusion, tuple(region_weights), self.branches, self.attn,
                           self.convs, self.fusion_attn)


@dataclass
class HadvsOutputs:
    o: Tensor
    b: Tensor
    f: Tensor
    l: Tensor
    fused: Tensor


def audio_cross_attention(z: Tensor, c_audio: Tensor, p: AttentionParams) -> Tensor:
    """Spatial sites of ``z`` attend over the audio tokens of ``c_audio``."""
    return cross_attention(z, c_audio, p)


def _token_mask(mask: np.ndarray, like: Tensor) -> Tensor:
    """Spread a ``[..., H, W]`` mask over ``like [..., H*W, D]``.

    Leading mask axes (a per-clip batch) align with the leading axes of
    ``like``; any axes in between (frames) are broadcast.
    """
    n_q = like.shape[-2]
    lead = mask.shape[:-2]
    if mask.shape[-2] * mask.shape[-1] != n_q:
        raise ShapeError(f"mask of spatial size {mask.shape[-2:]} does not match {n_q} query sites")
    extra = like.ndim - 2 - len(lead)
    if extra < 0 or like.shape[:len(lead)] != lead:
        raise ShapeError(f"mask batch axes {lead} do not fit {like.shape}")
    return broadcast_to(Tensor(mask.reshape(lead + (1,) * extra + (n_q, 1))), like.shape)


def split_by_region(o: Tensor, masks: RegionMasks) -> tuple[Tensor, Tensor, Tensor]:
    """Return ``(o * M_pose, o * M_exp, o * M_lip)``, masks spread over the feature axis."""
    b = hadamard(o, _token_mask(masks.m_pose, o))
    f = hadamard(o, _token_mask(masks.m_exp, o))
    l = hadamard(o, _token_mask(masks.m_lip, o))
    return b, f, l


def conv1x1_tokens(p: Conv1x1Params, x: Tensor) -> Tensor:
    """1x1 convolution in token layout: per-site channel mixing of ``x [..., N, C]``."""
    if x.shape[-1] != p.weight.shape[1]:
        raise ShapeError(f"conv1x1: {x.shape[-1]} channels vs weight {p.weight.shape}")
    return add_bias(matmul(x, transpose(p.weight)), p.bias)


def fuse(b: Tensor, f: Tensor, l: Tensor, cfg: HadvsConfig, full: Optional[Tensor] = None) -> Tensor:
    """Weighted fusion of the regional tensors named in ``cfg.branches``.

    ``full`` is the unmasked attention output, needed only when the ``full``
    branch is enabled (the regional ablations).
    """
    parts = {"pose": b, "exp": f, "lip": l}
    if full is not None:
        parts["full"] = full
    names = cfg.branches
    for n in names:
        if n not in parts:
            raise ValueError(f"missing regional input '{n}'")
    shape = parts[names[0]].shape
    for n in names:
        if parts[n].shape != shape:
            raise ShapeError(f"regional input '{n}' has shape {parts[n].shape}, expected {shape}")

    if cfg.fusion == "direct_addition":
        return add_n([scale(parts[n], cfg.weight(n)) for n in names])
    if cfg.fusion == "zero_convolution":
        return add_n([scale(conv1x1_tokens(cfg.convs[n], parts[n]), cfg.weight(n)) for n in names])
    if cfg.fusion == "self_attention":
        n_q = shape[-2]
        stacked = concat([parts[n] for n in names], axis=-2)
        mixed = self_attention(stacked, cfg.fusion_attn)
        slices = []
        for i, n in enumerate(names):
            sl = (Ellipsis, slice(i * n_q, (i + 1) * n_q), slice(None))
            slices.append(scale(mixed[sl], cfg.weight(n)))
        return add_n(slices)
    raise ValueError(f"unknown fusion mode '{cfg.fusion}'")


def hadvs_forward(z: Tensor, c_audio: Tensor, masks: RegionMasks, cfg: HadvsConfig) -> HadvsOutputs:
    o = audio_cross_attention(z, c_audio, cfg.attn)
    b, f, l = split_by_region(o, masks)
    fused = fuse(b, f, l, cfg, full=o)
    return HadvsOutputs(o, b, f, l, fused)


__all__ = ["HadvsConfig", "HadvsOutputs", "audio_cross_attention", "split_by_region", "fuse",
           "hadvs_forward", "conv1x1_tokens", "FUSION_MODES"]
