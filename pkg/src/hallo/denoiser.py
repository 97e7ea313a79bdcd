"""Toy UNet noise predictor with a reference network, face and audio conditioning.

Per down level the block order is: residual conv block (timestep embedding
added), spatial self-attention whose keys/values also hold the reference
features, face cross-attention, HADVS residual, temporal self-attention over
the frame axis.  The up path is plain residual conv blocks with skips.

All internal tensors carry a clip batch axis ``B`` and a frame axis ``N``
(motion frames first, then the ``S`` frames being denoised).
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import nn
from .attention import AttentionParams, cross_attention, self_attention
from .encoders import AudioProjector, ConditionBundle, LatentSpec
from .hadvs import HadvsConfig, hadvs_forward
from .maskgen import RegionMasks
from .nn import ParamStore, conv3x3, sinusoidal_embedding, upsample2x
from .tensor import (Conv1x1Params, LinearParams, ShapeError, Tensor, add, add_bias, broadcast_to, concat, hadamard,
                     index, linear_forward, reshape, silu, transpose)

# Parameter groups trained in each stage; everything else is frozen.
STAGE1_PREFIXES = ("unet.", "time.", "ref.", "null.face", "null.ref")
STAGE2_PREFIXES = ("hadvs.", "temporal.", "audio_proj.", "null.audio", "null.motion")


@dataclass
class DenoiserConfig:
    channels: tuple[int, ...] = (16, 32)
    temb_dim: int = 32
    motion_frames: int = 2
    timesteps: int = 100
    d_f: int = 16
    d_a: int = 32
    d_raw: int = 8
    audio_context: int = 1
    heads: int = 1
    fusion: str = "zero_convolution"
    branches: tuple[str, ...] = ("pose", "exp", "lip")
    use_hadvs: bool = True
    use_temporal: bool = True

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        self.branches = tuple(self.branches)
        if len(self.channels) < 1 or min(self.channels) < 1:
            raise ValueError("need at least one level with positive channels")
        if self.motion_frames < 0:
            raise ValueError("motion_frames must be >= 0")

    @property
    def levels(self) -> int:
        return len(self.channels)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        d["branches"] = list(self.branches)
        return d


@dataclass
class ReferenceFeatures:
    """Per-level maps ``[B, C_l, H_l, W_l]`` from the reference network."""
    levels: list[Tensor] = field(default_factory=list)

    def shapes(self) -> list[tuple]:
        return [t.shape for t in self.levels]


class Denoiser:
    def __init__(self, cfg: DenoiserConfig = DenoiserConfig(), latent: LatentSpec = LatentSpec(),
                 seed: int = 0, region_weights=(1.0, 1.0, 1.0)):
        if latent.h_z % (2 ** (cfg.levels - 1)) or latent.w_z % (2 ** (cfg.levels - 1)):
            raise ValueError("latent size must be divisible by 2^(levels-1)")
        self.cfg = cfg
        self.latent = latent
        self.region_weights = tuple(region_weights)
        self.params = p = ParamStore()
        # one stream per parameter group, so e.g. the fusion mode never shifts the UNet init
        streams = {g: np.random.default_rng([seed, 3, i])
                   for i, g in enumerate(("unet", "time", "hadvs", "temporal", "ref", "null"))}

        def rng_for(name):
            return streams[name.split(".")[0]]

        ch = cfg.channels
        d_z = latent.d_z

        def conv(name, co, ci, gain=1.0):
            p.add(f"{name}.w", nn.conv_init(rng_for(name), co, ci, gain))
            p.add(f"{name}.b", np.zeros(co))

        def attn(name, d_e, d_q, d_c, zero_value=False):
            a = AttentionParams.init(d_e, d_q, d_c, rng_for(name), zero_value=zero_value)
            for part, t in zip("qkv", a.parameters()):
                p.add(f"{name}.{part}", t.data)

        def res(name, c):
            conv(f"{name}.conv1", c, c)
            conv(f"{name}.conv2", c, c, gain=0.5)

        for l, c in enumerate(ch):
            p.add(f"time.{l}.w", nn.linear_init(streams["time"], c, cfg.temb_dim))
            p.add(f"time.{l}.b", np.zeros(c))
        conv("unet.conv_in", ch[0], d_z)
        for l, c in enumerate(ch):
            res(f"unet.down{l}.res", c)
            attn(f"unet.down{l}.sattn", c, c, c)
            attn(f"unet.down{l}.face", c, c, cfg.d_f)
            attn(f"hadvs.{l}.attn", c, c, cfg.d_a)
            if cfg.fusion == "zero_convolution":
                for b in cfg.branches:
                    p.add(f"hadvs.{l}.conv.{b}.w", np.zeros((c, c)))
                    p.add(f"hadvs.{l}.conv.{b}.b", np.zeros(c))
            elif cfg.fusion == "self_attention":
                attn(f"hadvs.{l}.fattn", c, c, c)
            attn(f"temporal.{l}", c, c, c, zero_value=True)
            if l + 1 < len(ch):
                conv(f"unet.downsample{l}", ch[l + 1], c)
        for l in range(len(ch) - 2, -1, -1):
            conv(f"unet.up{l}.conv", ch[l], ch[l + 1])
            res(f"unet.up{l}.res", ch[l])
        conv("unet.conv_out", d_z, ch[0], gain=0.1)

        conv("ref.conv_in", ch[0], d_z)
        for l, c in enumerate(ch):
            res(f"ref.down{l}.res", c)
            if l + 1 < len(ch):
                conv(f"ref.downsample{l}", ch[l + 1], c)

        p.add("null.face", streams["null"].normal(0.0, 0.1, cfg.d_f))
        p.add("null.ref", np.zeros(latent.latent_shape))
        p.add("null.audio", np.zeros(cfg.d_a))
        p.add("null.motion", np.zeros(latent.latent_shape))

        self.audio = AudioProjector(cfg.d_raw, cfg.d_a, seed=seed)
        p.adopt(self.audio.params)

    # -- helpers ------------------------------------------------------------------
    def _conv(self, x, name, stride=1):
        return conv3x3(x, self.params[f"{name}.w"], self.params[f"{name}.b"], stride)

    def _attn(self, name) -> AttentionParams:
        p = self.params
        return AttentionParams(p[f"{name}.q"], p[f"{name}.k"], p[f"{name}.v"], heads=self.cfg.heads)

    def _res(self, h, name, temb=None):
        y = self._conv(silu(h), f"{name}.conv1")
        if temb is not None:
            y = add(y, temb)
        return add(h, self._conv(silu(y), f"{name}.conv2"))

    def hadvs_config(self, level: int, region_weights=None) -> HadvsConfig:
        p, cfg = self.params, self.cfg
        convs, fattn = {}, None
        if cfg.fusion == "zero_convolution":
            convs = {b: Conv1x1Params(p[f"hadvs.{level}.conv.{b}.w"], p[f"hadvs.{level}.conv.{b}.b"], True)
                     for b in cfg.branches}
        elif cfg.fusion == "self_attention":
            fattn = self._attn(f"hadvs.{level}.fattn")
        return HadvsConfig(cfg.fusion, tuple(region_weights or self.region_weights), cfg.branches,
                           self._attn(f"hadvs.{level}.attn"), convs, fattn)

    def config_hash(self) -> str:
        blob = json.dumps({"denoiser": self.cfg.to_dict(), "latent": asdict(self.latent)}, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    # -- reference network ----------------------------------------------------------
    def reference(self, z_ref: Tensor) -> ReferenceFeatures:
        """Per-level features of ``z_ref [D_z, H, W]`` or ``[B, D_z, H, W]``."""
        x = z_ref if z_ref.ndim == 4 else reshape(z_ref, (1,) + z_ref.shape)
        if x.shape[1:] != self.latent.latent_shape:
            raise ShapeError(f"reference latent {z_ref.shape} does not match {self.latent.latent_shape}")
        h = self._conv(x, "ref.conv_in")
        feats = []
        for l in range(self.cfg.levels):
            h = self._res(h, f"ref.down{l}.res")
            feats.append(h)
            if l + 1 < self.cfg.levels:
                h = self._conv(h, f"ref.downsample{l}", stride=2)
        return ReferenceFeatures(feats)

    def null_reference(self, batch: int = 1) -> ReferenceFeatures:
        z = broadcast_to(reshape(self.params["null.ref"], (1,) + self.latent.latent_shape),
                         (batch,) + self.latent.latent_shape)
        return self.reference(z)

    # -- conditioning helpers ---------------------------------------------------------
    @staticmethod
    def _select(real: Tensor, null: Tensor, drop: np.ndarray) -> Tensor:
        """Per-clip choice between ``real [B, ...]`` and the broadcast ``null``."""
        if not drop.any():
            return real
        nb = broadcast_to(reshape(null, (1,) * (real.ndim - null.ndim) + null.shape), real.shape)
        if drop.all():
            return nb
        d = drop.astype(np.float64).reshape((-1,) + (1,) * (real.ndim - 1))
        keep = Tensor(np.broadcast_to(1.0 - d, real.shape).copy())
        take = Tensor(np.broadcast_to(d, real.shape).copy())
        return add(hadamard(real, keep), hadamard(nb, take))

    def _audio_tokens(self, c_audio: Tensor) -> Tensor:
        """``[B, S, D_a]`` to ``[B, S, 2*ctx+1, D_a]`` with edge-clamped neighbours."""
        s = c_audio.shape[1]
        ctx = self.cfg.audio_context
        idx = np.clip(np.arange(s)[:, None] + np.arange(-ctx, ctx + 1)[None, :], 0, s - 1)
        return index(c_audio, (slice(None), idx))

    # -- main forward -------------------------------------------------------------------
    def forward_batch(self, z_t: Tensor, t, c_exp: Tensor, c_audio: Optional[Tensor],
                      ref: ReferenceFeatures, masks: Optional[RegionMasks],
                      motion: Optional[Tensor] = None, drop_face=None, drop_audio=None, drop_motion=None,
                      use_hadvs: Optional[bool] = None, use_temporal: Optional[bool] = None,
                      region_weights=None) -> Tensor:
        """Batched noise prediction.

        ``z_t [B, S, D_z, H, W]``, ``t`` ints ``[B]``, ``c_exp [B, D_f]``,
        ``c_audio [B, S, D_a]``, reference features with batch ``B`` (or 1),
        masks with leading axis ``B`` (or unbatched), ``motion [B, k, D_z, H, W]``.
        Drop flags are boolean arrays ``[B]``.
        """
        cfg = self.cfg
        use_hadvs = cfg.use_hadvs if use_hadvs is None else use_hadvs
        use_temporal = cfg.use_temporal if use_temporal is None else use_temporal
        if z_t.ndim != 5 or z_t.shape[2:] != self.latent.latent_shape:
            raise ShapeError(f"z_t must be [B, S, {self.latent.latent_shape}], got {z_t.shape}")
        b, s = z_t.shape[:2]
        t = np.broadcast_to(np.asarray(t, dtype=np.int64), (b,))
        if np.any(t < 0) or np.any(t >= cfg.timesteps):
            raise ValueError(f"timestep out of range [0, {cfg.timesteps}): {t}")
        flags = [np.zeros(b, bool) if f is None else np.broadcast_to(np.asarray(f, bool), (b,))
                 for f in (drop_face, drop_audio, drop_motion)]
        drop_face, drop_audio, drop_motion = flags
        p = self.params
        hz, wz = self.latent.h_z, self.latent.w_z
        if use_hadvs and masks is not None and tuple(masks.latent_size) != (hz, wz):
            raise ShapeError(f"mask grid {masks.latent_size} does not match latent {hz}x{wz}")

        # frames: motion first
        k = cfg.motion_frames if use_temporal else 0
        if k:
            if motion is None:
                motion = broadcast_to(reshape(p["null.motion"], (1, 1) + self.latent.latent_shape),
                                      (b, k) + self.latent.latent_shape)
            elif motion.shape != (b, k) + self.latent.latent_shape:
                raise ShapeError(f"motion frames must be {(b, k) + self.latent.latent_shape}, got {motion.shape}")
            else:
                motion = self._select(motion, p["null.motion"], drop_motion)
            x = concat([motion, z_t], axis=1)
        else:
            x = z_t
        n = k + s
        h = reshape(x, (b * n,) + self.latent.latent_shape)

        # conditions
        face = self._select(c_exp, p["null.face"], drop_face)
        face_tok = broadcast_to(reshape(face, (b, 1, 1, cfg.d_f)), (b, n, 1, cfg.d_f))
        null_ref = self.null_reference(1) if drop_face.any() else None
        audio_tok = None
        if use_hadvs:
            if c_audio is None or c_audio.shape != (b, s, cfg.d_a):
                raise ShapeError(f"c_audio must be {(b, s, cfg.d_a)}")
            audio_tok = self._audio_tokens(self._select(c_audio, p["null.audio"], drop_audio))

        temb_raw = Tensor(sinusoidal_embedding(t, cfg.temb_dim))
        tembs = []
        for l, c in enumerate(cfg.channels):
            e = linear_forward(LinearParams(p[f"time.{l}.w"], p[f"time.{l}.b"]), temb_raw)
            hl, wl = hz >> l, wz >> l
            e = broadcast_to(reshape(e, (b, 1, c, 1, 1)), (b, n, c, hl, wl))
            tembs.append(reshape(e, (b * n, c, hl, wl)))

        h = self._conv(h, "unet.conv_in")
        skips = []
        for l, c in enumerate(cfg.channels):
            hl, wl = hz >> l, wz >> l
            h = self._res(h, f"unet.down{l}.res", tembs[l])
            tok = transpose(reshape(h, (b, n, c, hl * wl)), (0, 1, 3, 2))  # [B, N, HW, C]

            rf = ref.levels[l]
            if rf.shape[1:] != (c, hl, wl):
                raise ShapeError(f"reference level {l} has shape {rf.shape}, expected [*, {c}, {hl}, {wl}]")
            if rf.shape[0] == 1 and b > 1:
                rf = broadcast_to(rf, (b, c, hl, wl))
            if null_ref is not None:
                rf = self._select(rf, reshape(null_ref.levels[l], (c, hl, wl)), drop_face)
            rtok = transpose(reshape(rf, (b, 1, c, hl * wl)), (0, 1, 3, 2))
            keys = concat([tok, broadcast_to(rtok, (b, n, hl * wl, c))], axis=2)
            tok = add(tok, cross_attention(tok, keys, self._attn(f"unet.down{l}.sattn")))
            tok = add(tok, cross_attention(tok, face_tok, self._attn(f"unet.down{l}.face")))

            if use_hadvs:
                lm = masks.downsample(2 ** l) if l else masks
                hcfg = self.hadvs_config(l, region_weights)
                target = index(tok, (slice(None), slice(k, None))) if k else tok
                fused = hadvs_forward(target, audio_tok, lm, hcfg).fused
                if k:
                    fused = concat([Tensor(np.zeros((b, k, hl * wl, c))), fused], axis=1)
                tok = add(tok, fused)

            if use_temporal:
                tt = transpose(tok, (0, 2, 1, 3))  # [B, HW, N, C]
                pe = Tensor(sinusoidal_embedding(np.arange(n), c))
                tin = add(tt, broadcast_to(pe, tt.shape))
                tt = add(tt, self_attention(tin, self._attn(f"temporal.{l}")))
                tok = transpose(tt, (0, 2, 1, 3))

            h = reshape(transpose(tok, (0, 1, 3, 2)), (b * n, c, hl, wl))
            skips.append(h)
            if l + 1 < cfg.levels:
                h = self._conv(h, f"unet.downsample{l}", stride=2)

        for l in range(cfg.levels - 2, -1, -1):
            h = self._conv(upsample2x(h), f"unet.up{l}.conv")
            h = add(h, skips[l])
            h = self._res(h, f"unet.up{l}.res", tembs[l])
        out = self._conv(h, "unet.conv_out")
        out = reshape(out, (b, n) + self.latent.latent_shape)
        return index(out, (slice(None), slice(k, None))) if k else out

    def forward(self, z_t: Tensor, t: int, cond: ConditionBundle, ref: ReferenceFeatures,
                masks: Optional[RegionMasks], motion: Optional[Tensor] = None, **kw) -> Tensor:
        """Single clip: ``z_t [S, D_z, H, W]`` to the predicted noise, same shape."""
        if z_t.ndim != 4:
            raise ShapeError(f"z_t must be [S, D_z, H, W], got {z_t.shape}")
        s = z_t.shape[0]
        if cond.frames != s:
            raise ShapeError(f"condition has {cond.frames} audio frames for {s} latent frames")
        z = reshape(z_t, (1,) + z_t.shape)
        c_exp = reshape(cond.c_exp, (1, cond.c_exp.shape[-1]))
        c_audio = reshape(cond.c_audio, (1,) + cond.c_audio.shape)
        mot = reshape(motion, (1,) + motion.shape) if motion is not None else None
        if mot is not None and mot.shape[1] == 0:
            mot = None
        out = self.forward_batch(z, [t], c_exp, c_audio, ref, masks, mot,
                                 drop_face=[cond.drop_face], drop_audio=[cond.drop_audio],
                                 drop_motion=[cond.drop_motion], **kw)
        return reshape(out, z_t.shape)

    __call__ = forward

    # -- parameter groups --------------------------------------------------------------
    def stage_prefixes(self, stage: int) -> Sequence[str]:
        return STAGE1_PREFIXES if stage == 1 else STAGE2_PREFIXES


def reference_forward(model: Denoiser, z_ref: Tensor) -> ReferenceFeatures:
    return model.reference(z_ref)


def denoiser_forward(model: Denoiser, z_t: Tensor, t: int, cond: ConditionBundle, ref: ReferenceFeatures,
                     masks: Optional[RegionMasks], motion: Optional[Tensor] = None, **kw) -> Tensor:
    return model.forward(z_t, t, cond, ref, masks, motion, **kw)
