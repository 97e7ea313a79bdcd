"""Toy autoencoder, face identity encoder and audio feature projection."""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import nn
from .nn import ParamStore, avgpool, conv3x3, upsample2x
from .tensor import (LinearParams, ShapeError, Tensor, add_bias, broadcast_to, clip, div, hadamard,
                     linear_forward, no_grad, relu, reshape, silu, sqrt, tensor_sum)

AUDIO_LAYERS = 12


@dataclass(frozen=True)
class LatentSpec:
    h_z: int = 16
    w_z: int = 16
    d_z: int = 4
    h_i: int = 64
    w_i: int = 64

    def __post_init__(self):
        if min(self.h_z, self.w_z, self.d_z, self.h_i, self.w_i) < 1:
            raise ValueError("latent and image extents must be positive")
        if self.h_i % self.h_z or self.w_i % self.w_z:
            raise ValueError(f"image {self.h_i}x{self.w_i} is not an integer multiple of "
                             f"latent {self.h_z}x{self.w_z}")

    @property
    def factor(self) -> int:
        return self.h_i // self.h_z

    @property
    def latent_shape(self) -> tuple[int, int, int]:
        return (self.d_z, self.h_z, self.w_z)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return (3, self.h_i, self.w_i)


@dataclass
class ConditionBundle:
    """Per-clip conditioning.

    ``drop_face`` removes the whole image condition (face embedding and
    reference features); ``drop_audio`` and ``drop_motion`` remove the audio
    tokens and the motion frames.  The denoiser swaps in its learned null
    embeddings for dropped parts.
    """
    c_exp: Tensor  # [D_f]
    c_audio: Tensor  # [S, D_a]
    drop_face: bool = False
    drop_audio: bool = False
    drop_motion: bool = False

    def __post_init__(self):
        if not isinstance(self.c_exp, Tensor):
            self.c_exp = Tensor(self.c_exp)
        if not isinstance(self.c_audio, Tensor):
            self.c_audio = Tensor(self.c_audio)
        if self.c_audio.ndim != 2 or self.c_audio.shape[0] < 1:
            raise ShapeError(f"c_audio must be [S, D_a] with S >= 1, got {self.c_audio.shape}")
        if not (np.all(np.isfinite(self.c_exp.data)) and np.all(np.isfinite(self.c_audio.data))):
            raise ValueError("condition embeddings must be finite")

    @property
    def frames(self) -> int:
        return self.c_audio.shape[0]

    def replace(self, **kw) -> "ConditionBundle":
        fields = dict(c_exp=self.c_exp, c_audio=self.c_audio, drop_face=self.drop_face,
                      drop_audio=self.drop_audio, drop_motion=self.drop_motion)
        fields.update(kw)
        return ConditionBundle(**fields)


# ---------------------------------------------------------------------------
# autoencoder
# ---------------------------------------------------------------------------

class ToyVAE:
    """Deterministic convolutional autoencoder: 3x64x64 pixels <-> 4x16x16 latents.

    The encoder uses two stride-2 convolutions per factor of 4; the decoder
    mirrors it with nearest upsampling.  Latents are multiplied by
    ``latent_scale`` (fit after training so latents have unit variance).
    """

    def __init__(self, spec: LatentSpec = LatentSpec(), seed: int = 0, width: int = 16):
        if spec.factor not in (1, 2, 4, 8):
            raise ValueError(f"unsupported downsampling factor {spec.factor}")
        self.spec = spec
        self.params = ParamStore()
        self.latent_scale = 1.0
        rng = np.random.default_rng(seed)
        n_down = int(round(math.log2(spec.factor)))
        half = width // 2
        self._enc = [(3, half, 1)]
        c = half
        for _ in range(n_down):
            self._enc.append((c, width, 2))
            c = width
        self._enc.append((c, spec.d_z, 1))
        self._dec = [(spec.d_z, width, 1)]
        c = width
        for i in range(n_down):
            nxt = half if i == n_down - 1 else width
            self._dec.append((c, nxt, 1))
            c = nxt
        self._dec.append((c, 3, 1))
        for i, (ci, co, _) in enumerate(self._enc):
            self.params.add(f"enc.{i}.w", nn.conv_init(rng, co, ci))
            self.params.add(f"enc.{i}.b", np.zeros(co))
        for i, (ci, co, _) in enumerate(self._dec):
            self.params.add(f"dec.{i}.w", nn.conv_init(rng, co, ci))
            self.params.add(f"dec.{i}.b", np.zeros(co) + (0.5 if i == len(self._dec) - 1 else 0.0))
        self._n_down = n_down

    def encode(self, images: Tensor) -> Tensor:
        """``[3, H_I, W_I]`` or ``[N, 3, H_I, W_I]`` in [0, 1] to latents."""
        single = images.ndim == 3
        x = reshape(images, (1,) + images.shape) if single else images
        if x.ndim != 4 or x.shape[1:] != self.spec.image_shape:
            raise ShapeError(f"vae_encode expects [..., 3, {self.spec.h_i}, {self.spec.w_i}], got {images.shape}")
        p = self.params
        for i, (_, _, stride) in enumerate(self._enc):
            x = conv3x3(x, p[f"enc.{i}.w"], p[f"enc.{i}.b"], stride)
            if i < len(self._enc) - 1:
                x = silu(x)
        x = x * self.latent_scale
        return reshape(x, x.shape[1:]) if single else x

    def decode(self, latents: Tensor, clamp: bool = True) -> Tensor:
        single = latents.ndim == 3
        x = reshape(latents, (1,) + latents.shape) if single else latents
        if x.ndim != 4 or x.shape[1:] != self.spec.latent_shape:
            raise ShapeError(f"vae_decode expects [..., {self.spec.d_z}, {self.spec.h_z}, {self.spec.w_z}], "
                             f"got {latents.shape}")
        x = x * (1.0 / self.latent_scale)
        p = self.params
        last = len(self._dec) - 1
        for i in range(len(self._dec)):
            if 1 <= i <= self._n_down:
                x = upsample2x(x)
            x = conv3x3(x, p[f"dec.{i}.w"], p[f"dec.{i}.b"])
            if i < last:
                x = silu(x)
        if clamp:
            x = clip(x, 0.0, 1.0)
        return reshape(x, x.shape[1:]) if single else x

    def fit_latent_scale(self, images: np.ndarray) -> float:
        self.latent_scale = 1.0
        with no_grad():
            z = self.encode(Tensor(images)).data
        self.latent_scale = float(1.0 / max(z.std(), 1e-8))
        return self.latent_scale


def vae_encode(vae: ToyVAE, image: Tensor) -> Tensor:
    return vae.encode(image)


def vae_decode(vae: ToyVAE, z: Tensor) -> Tensor:
    return vae.decode(z)


# ---------------------------------------------------------------------------
# face identity encoder
# ---------------------------------------------------------------------------

class FaceEncoder:
    """Pooled pixels -> two linear layers -> unit-norm identity embedding."""

    def __init__(self, spec: LatentSpec = LatentSpec(), d_f: int = 16, seed: int = 0,
                 pool: int = 8, hidden: int = 64):
        if spec.h_i % pool or spec.w_i % pool:
            raise ValueError("pool must divide the image size")
        self.spec, self.d_f, self.pool = spec, d_f, pool
        rng = np.random.default_rng(seed + 101)
        d_in = 3 * (spec.h_i // pool) * (spec.w_i // pool)
        self.params = ParamStore()
        self.params.add("face.0.w", nn.linear_init(rng, hidden, d_in))
        self.params.add("face.0.b", np.zeros(hidden))
        self.params.add("face.1.w", nn.linear_init(rng, d_f, hidden))
        self.params.add("face.1.b", np.zeros(d_f))

    def raw(self, images: Tensor) -> Tensor:
        x = images if images.ndim == 4 else reshape(images, (1,) + images.shape)
        if x.shape[1:] != self.spec.image_shape:
            raise ShapeError(f"face_encode expects [3, {self.spec.h_i}, {self.spec.w_i}], got {images.shape}")
        x = avgpool(x, self.pool)
        x = reshape(x, (x.shape[0], int(np.prod(x.shape[1:]))))
        p = self.params
        x = silu(linear_forward(LinearParams(p["face.0.w"], p["face.0.b"]), x))
        return linear_forward(LinearParams(p["face.1.w"], p["face.1.b"]), x)

    def __call__(self, images: Tensor) -> Tensor:
        e = l2_normalize(self.raw(images))
        return reshape(e, (self.d_f,)) if images.ndim == 3 else e


def l2_normalize(x: Tensor, eps: float = 1e-30) -> Tensor:
    """Normalize the rows of ``x [N, D]`` to unit Euclidean length."""
    n, d = x.shape
    sq = tensor_sum(hadamard(x, x), axis=1)
    norm = sqrt(add_bias(reshape(sq, (n, 1)), Tensor(np.array([eps]))))
    return div(x, broadcast_to(norm, (n, d)))


def face_encode(enc: FaceEncoder, image: Tensor) -> Tensor:
    return enc(image)


# ---------------------------------------------------------------------------
# audio
# ---------------------------------------------------------------------------

class AudioProjector:
    """Three linear layers with ReLU between, applied per frame."""

    def __init__(self, d_raw: int = 8, d_a: int = 32, hidden: int = 64, seed: int = 0, prefix: str = "audio_proj"):
        self.d_in = AUDIO_LAYERS * d_raw
        self.d_a = d_a
        self.prefix = prefix
        rng = np.random.default_rng(seed + 202)
        self.params = ParamStore()
        dims = [self.d_in, hidden, hidden, d_a]
        for i in range(3):
            self.params.add(f"{prefix}.{i}.w", nn.linear_init(rng, dims[i + 1], dims[i]))
            self.params.add(f"{prefix}.{i}.b", np.zeros(dims[i + 1]))

    def layers(self) -> list[LinearParams]:
        p = self.params
        return [LinearParams(p[f"{self.prefix}.{i}.w"], p[f"{self.prefix}.{i}.b"]) for i in range(3)]

    def __call__(self, raw: Tensor) -> Tensor:
        if raw.shape[-1] != self.d_in:
            raise ShapeError(f"audio features have width {raw.shape[-1]}, expected {self.d_in} "
                             f"(= {AUDIO_LAYERS} layers x {self.d_in // AUDIO_LAYERS})")
        x = raw
        layers = self.layers()
        for i, lp in enumerate(layers):
            x = linear_forward(lp, x)
            if i < len(layers) - 1:
                x = relu(x)
        return x


def audio_project(proj: AudioProjector, raw: Tensor) -> Tensor:
    return proj(raw)


def audio_segment(features, clip_start_frame: int, s: int, fps: float,
                  window_seconds: float = 5.0) -> np.ndarray:
    """Rows for ``s`` frames drawn from a ``window_seconds`` context centred on the clip.

    The window spans ``round(window_seconds * fps)`` timeline rows centred on
    the clip's centre; the ``s`` output rows sample it uniformly.  Rows that
    fall outside the feature timeline are zero.  When the window length equals
    ``s`` this is exactly the clip's own row slice.
    """
    if clip_start_frame < 0:
        raise ValueError("clip start must be non-negative")
    if s < 1:
        raise ValueError("S must be at least 1")
    feats = features.data if isinstance(features, Tensor) else np.asarray(features, dtype=np.float64)
    idx = window_indices(clip_start_frame, s, fps, window_seconds)
    out = np.zeros((s, feats.shape[1]))
    ok = (idx >= 0) & (idx < feats.shape[0])
    out[ok] = feats[idx[ok]]
    return out


def window_indices(clip_start_frame: int, s: int, fps: float, window_seconds: float = 5.0) -> np.ndarray:
    """Timeline row for each of the ``s`` output rows (may fall outside the timeline)."""
    n_w = max(1, int(round(window_seconds * fps)))
    start = (2 * clip_start_frame + s - n_w) // 2  # doubled centre keeps it integral
    return start + (np.arange(s) * n_w) // s


# ---------------------------------------------------------------------------
# images
# ---------------------------------------------------------------------------

def read_ppm(path) -> np.ndarray:
    """Binary PPM (P6, maxval 255) to a ``[3, H, W]`` float array in [0, 1]."""
    buf = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while buf[pos:pos + 1].isspace():
            pos += 1
        if buf[pos:pos + 1] == b"#":
            while buf[pos:pos + 1] not in (b"\n", b""):
                pos += 1
            continue
        start = pos
        while not buf[pos:pos + 1].isspace():
            pos += 1
        tokens.append(buf[start:pos])
    if tokens[0] != b"P6" or int(tokens[3]) != 255:
        raise ValueError(f"{path}: only P6 PPM with maxval 255 is supported")
    w, h = int(tokens[1]), int(tokens[2])
    data = np.frombuffer(buf[pos + 1:pos + 1 + 3 * w * h], dtype=np.uint8)
    return data.reshape(h, w, 3).transpose(2, 0, 1).astype(np.float64) / 255.0


def write_ppm(path, image) -> None:
    arr = image.data if isinstance(image, Tensor) else np.asarray(image)
    px = np.clip(np.round(arr * 255.0), 0, 255).astype(np.uint8).transpose(1, 2, 0)
    h, w = px.shape[:2]
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode() + px.tobytes())
