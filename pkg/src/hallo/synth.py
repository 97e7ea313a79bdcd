"""Procedural face-like talking clips with exact landmarks and matching audio features.

Each identity is a coloured ellipse head with eyes, brows and a mouth box on
a flat background.  A per-clip envelope in [0, 1] drives the mouth opening
(and, smoothed, the brow height); the same envelope modulates the synthetic
12-layer audio features, so audio and lip motion are correlated by
construction.

On-disk layout::

    corpus.json
    id00/landmarks.txt
    id00/clip000/frame_0000.ppm ...
    id00/clip000/audio.htns        # [frames, 12 * d_raw]
    id00/clip000/meta.json         # envelope and identity
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import htns
from .encoders import AUDIO_LAYERS, read_ppm, write_ppm
from .maskgen import LandmarkSet, format_landmarks, load_landmarks

DEFAULT_FPS = 14 / 5  # one 14-frame clip spans the 5 s audio window
IMAGE = 64


@dataclass(frozen=True)
class Identity:
    index: int
    skin: tuple[float, float, float]
    background: tuple[float, float, float]
    cx: float
    cy: float
    rx: float
    ry: float
    mouth_w: float


def make_identity(index: int, seed: int = 0) -> Identity:
    rng = np.random.default_rng([seed, index, 7])
    skin = tuple(float(v) for v in rng.uniform(0.35, 0.95, 3))
    background = tuple(float(v) for v in rng.uniform(0.05, 0.5, 3))
    return Identity(index, skin, background,
                    cx=float(32 + rng.uniform(-3, 3)), cy=float(33 + rng.uniform(-2, 2)),
                    rx=float(rng.uniform(18, 22)), ry=float(rng.uniform(22, 26)),
                    mouth_w=float(rng.uniform(12, 16)))


MOUTH_MIN, MOUTH_SPAN = 1.5, 8.0


def _mouth_box(ident: Identity, opening: float) -> tuple[float, float, float, float]:
    top = ident.cy + 0.45 * ident.ry - MOUTH_MIN
    h = MOUTH_MIN + MOUTH_SPAN * opening
    return ident.cx - ident.mouth_w / 2, top, ident.cx + ident.mouth_w / 2, top + h


def _soft(d: np.ndarray, width: float = 0.7) -> np.ndarray:
    # 1 inside (d < 0), 0 outside, smooth over ~width px
    return 1.0 / (1.0 + np.exp(np.clip(d / width, -50, 50)))


def render_frame(ident: Identity, opening: float, brow: float) -> np.ndarray:
    """``[3, 64, 64]`` image in [0, 1]."""
    yy, xx = np.mgrid[0:IMAGE, 0:IMAGE] + 0.5
    img = np.empty((3, IMAGE, IMAGE))
    img[:] = np.asarray(ident.background)[:, None, None]

    def paint(alpha, colour):
        img[:] = img * (1 - alpha) + np.asarray(colour)[:, None, None] * alpha

    head = np.sqrt(((xx - ident.cx) / ident.rx) ** 2 + ((yy - ident.cy) / ident.ry) ** 2)
    paint(_soft((head - 1.0) * min(ident.rx, ident.ry)), ident.skin)
    dark = tuple(0.25 * c for c in ident.skin)
    for side in (-1, 1):
        ex, ey = ident.cx + side * 0.38 * ident.rx, ident.cy - 0.2 * ident.ry
        paint(_soft(np.hypot(xx - ex, yy - ey) - 2.6), (0.05, 0.05, 0.08))
        by = ey - 5.0 - 2.5 * brow
        d = np.maximum(np.abs(xx - ex) - 4.0, np.abs(yy - by) - 0.9)
        paint(_soft(d), dark)
    x0, y0, x1, y1 = _mouth_box(ident, opening)
    d = np.maximum(np.maximum(x0 - xx, xx - x1), np.maximum(y0 - yy, yy - y1))
    paint(_soft(d), (0.55, 0.08, 0.12))
    return np.clip(img, 0.0, 1.0)


def identity_landmarks(ident: Identity) -> LandmarkSet:
    """Lip landmarks span the fully open mouth; expression landmarks span brows to chin."""
    x0, y0, x1, y1 = _mouth_box(ident, 1.0)
    lip = ((x0, y0), (x1, y0), (ident.cx, y1), (ident.cx, y0 + 1))
    ex = 0.38 * ident.rx + 4.0
    top = ident.cy - 0.2 * ident.ry - 9.0
    exp = ((ident.cx - ex, top), (ident.cx + ex, top), (ident.cx, min(y1 + 2.0, IMAGE - 1)))

    def clamp(pts):
        return tuple((float(np.clip(x, 0, IMAGE - 1)), float(np.clip(y, 0, IMAGE - 1))) for x, y in pts)

    return LandmarkSet(clamp(lip), clamp(exp), (IMAGE, IMAGE))


def envelope(n: int, rng: np.random.Generator) -> np.ndarray:
    """Speech-like loudness in [0, 1]: lightly smoothed random syllables with pauses."""
    raw = rng.uniform(0.0, 1.0, n + 2)
    raw[rng.uniform(size=n + 2) < 0.15] = 0.0
    sm = 0.25 * raw[:-2] + 0.5 * raw[1:-1] + 0.25 * raw[2:]
    return np.clip(sm, 0.0, 1.0)


def brow_track(env: np.ndarray) -> np.ndarray:
    k = np.ones(5) / 5
    return np.convolve(np.pad(env, 2, mode="edge"), k, mode="valid")


def audio_pattern(d_raw: int = 8, seed: int = 0) -> np.ndarray:
    rng = np.random.default_rng([seed, 99])
    return rng.normal(0.0, 1.0, (AUDIO_LAYERS, d_raw))


def audio_features(env: np.ndarray, rng: np.random.Generator, d_raw: int = 8, seed: int = 0) -> np.ndarray:
    """``[n, 12 * d_raw]`` features: a fixed per-layer pattern scaled by the envelope,
    plus a weak oscillation and noise."""
    n = len(env)
    pat = audio_pattern(d_raw, seed).reshape(-1)
    t = np.arange(n)[:, None]
    freqs = np.linspace(0.3, 1.7, pat.size)[None, :]
    phase = rng.uniform(0, 2 * np.pi, pat.size)[None, :]
    return env[:, None] * pat[None, :] + 0.1 * np.sin(freqs * t + phase) + 0.02 * rng.normal(size=(n, pat.size))


def generate_clip(ident: Identity, n_frames: int, rng: np.random.Generator, d_raw: int = 8,
                  seed: int = 0) -> dict:
    env = envelope(n_frames, rng)
    brow = brow_track(env)
    frames = np.stack([render_frame(ident, e, b) for e, b in zip(env, brow)])
    return {"frames": frames, "audio": audio_features(env, rng, d_raw, seed), "envelope": env}


def generate_corpus(out_dir, ids: int = 4, clips: int = 64, frames: int = 16, seed: int = 0,
                    d_raw: int = 8, fps: float = DEFAULT_FPS) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for i in range(ids):
        ident = make_identity(i, seed)
        idir = out / f"id{i:02d}"
        idir.mkdir(exist_ok=True)
        (idir / "landmarks.txt").write_text(format_landmarks(identity_landmarks(ident)))
        for c in range(clips):
            rng = np.random.default_rng([seed, i, c])
            clip = generate_clip(ident, frames, rng, d_raw, seed)
            cdir = idir / f"clip{c:03d}"
            cdir.mkdir(exist_ok=True)
            for s, img in enumerate(clip["frames"]):
                write_ppm(cdir / f"frame_{s:04d}.ppm", img)
            htns.save(cdir / "audio.htns", clip["audio"])
            (cdir / "meta.json").write_text(json.dumps(
                {"identity": asdict(ident), "envelope": clip["envelope"].tolist()}, indent=1))
    (out / "corpus.json").write_text(json.dumps(
        {"ids": ids, "clips": clips, "frames": frames, "seed": seed, "d_raw": d_raw, "fps": fps}, indent=1))
    return out


@dataclass
class ClipRecord:
    identity: int
    index: int
    path: Path
    frames: np.ndarray  # [n, 3, H, W], float32 to halve corpus memory
    audio: np.ndarray  # [n, 12 * d_raw]
    envelope: np.ndarray


@dataclass
class Corpus:
    root: Path
    meta: dict
    landmarks: dict[int, LandmarkSet]
    clips: list[ClipRecord]

    @property
    def fps(self) -> float:
        return float(self.meta.get("fps", DEFAULT_FPS))

    def by_identity(self, i: int) -> list[ClipRecord]:
        return [c for c in self.clips if c.identity == i]

    def all_frames(self) -> np.ndarray:
        return np.concatenate([c.frames for c in self.clips])


def load_corpus(root) -> Corpus:
    root = Path(root)
    meta = json.loads((root / "corpus.json").read_text())
    landmarks, clips = {}, []
    for i in range(meta["ids"]):
        idir = root / f"id{i:02d}"
        landmarks[i] = load_landmarks(idir / "landmarks.txt")
        for cdir in sorted(p for p in idir.iterdir() if p.is_dir()):
            frames = np.stack([read_ppm(f) for f in sorted(cdir.glob("frame_*.ppm"))]).astype(np.float32)
            info = json.loads((cdir / "meta.json").read_text())
            clips.append(ClipRecord(i, int(cdir.name[4:]), cdir, frames, htns.load(cdir / "audio.htns"),
                                    np.asarray(info["envelope"])))
    return Corpus(root, meta, landmarks, clips)
