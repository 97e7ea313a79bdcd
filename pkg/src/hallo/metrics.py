"""Fréchet distance on feature sets and a correlation-based lip-sync proxy.

The features here are hand-crafted pixel statistics, and the sync scores are
a correlation proxy.  Neither is comparable to Inception/I3D-based FID/FVD or
SyncNet scores; they only rank runs of this package against each other.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

PROXY_NOTE = "proxy metrics: hand-crafted features and correlation sync scores, not comparable to published FID/FVD/Sync values"
MAX_OFFSET = 5


@dataclass
class FeatureSet:
    features: np.ndarray  # [N, D]

    def __post_init__(self):
        f = np.asarray(self.features, dtype=np.float64)
        if f.ndim != 2:
            raise ValueError(f"features must be [N, D], got shape {f.shape}")
        if f.shape[0] < 2:
            raise ValueError(f"need at least 2 samples, got {f.shape[0]}")
        if not np.all(np.isfinite(f)):
            raise ValueError("features contain non-finite values")
        self.features = f
        self.mean = f.mean(axis=0)
        self.covariance = np.atleast_2d(np.cov(f, rowvar=False, ddof=1))

    @property
    def dim(self) -> int:
        return self.features.shape[1]


def _psd_sqrt(m: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh((m + m.T) / 2)
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def frechet_distance(a: FeatureSet, b: FeatureSet) -> float:
    """``|mu_a - mu_b|^2 + tr(S_a + S_b - 2 (S_a S_b)^(1/2))``.

    The trace of the cross term is taken from the eigenvalues of the symmetric
    matrix ``S_a^(1/2) S_b S_a^(1/2)``, which has the same spectrum as ``S_a S_b``.
    """
    if a.dim != b.dim:
        raise ValueError(f"feature dimensions differ: {a.dim} vs {b.dim}")
    ra = _psd_sqrt(a.covariance)
    m = ra @ b.covariance @ ra
    w = np.linalg.eigvalsh((m + m.T) / 2)
    cross = np.sqrt(np.clip(w, 0.0, None)).sum()
    d = a.mean - b.mean
    val = float(d @ d + np.trace(a.covariance) + np.trace(b.covariance) - 2.0 * cross)
    return max(val, 0.0)


def _pool(x: np.ndarray, grid: int) -> np.ndarray:
    h, w = x.shape[-2:]
    if h % grid or w % grid:
        raise ValueError(f"frame size {h}x{w} not divisible by the {grid}x{grid} feature grid")
    return x.reshape(x.shape[:-2] + (grid, h // grid, grid, w // grid)).mean(axis=(-3, -1))


def frame_features(frames, grid: int = 4) -> np.ndarray:
    """Per-frame features ``[N, 4 * grid^2]``: per-channel cell means (3 grid^2) and
    cell means of the luminance gradient magnitude ``|dx| + |dy|`` (grid^2)."""
    x = np.asarray(frames, dtype=np.float64)
    if x.ndim != 4 or x.shape[1] != 3:
        raise ValueError(f"frames must be [N, 3, H, W], got {x.shape}")
    n = x.shape[0]
    colour = _pool(x, grid).reshape(n, -1)
    lum = x.mean(axis=1)
    g = np.zeros_like(lum)
    g[:, :, 1:] += np.abs(np.diff(lum, axis=2))
    g[:, 1:, :] += np.abs(np.diff(lum, axis=1))
    return np.concatenate([colour, _pool(g, grid).reshape(n, -1)], axis=1)


def clip_features(frames, grid: int = 4) -> FeatureSet:
    """Image-level feature set (D = 64 at the default grid)."""
    return FeatureSet(frame_features(frames, grid))


def video_features(clips, grid: int = 4) -> FeatureSet:
    """Video-level feature set over ``clips [N, S, 3, H, W]``: the mean frame
    features (4 grid^2) followed by cell means of the mean absolute temporal
    luminance difference (grid^2)."""
    v = np.asarray(clips, dtype=np.float64)
    if v.ndim != 5 or v.shape[1] < 2:
        raise ValueError(f"clips must be [N, S >= 2, 3, H, W], got {v.shape}")
    n, s = v.shape[:2]
    per = frame_features(v.reshape((n * s,) + v.shape[2:]), grid).reshape(n, s, -1).mean(axis=1)
    lum = v.mean(axis=2)
    motion = _pool(np.abs(np.diff(lum, axis=1)).mean(axis=1), grid).reshape(n, -1)
    return FeatureSet(np.concatenate([per, motion], axis=1))


@dataclass
class SyncResult:
    sync_c: float
    sync_d: float
    offset: int


def audio_energy(audio) -> np.ndarray:
    """``[S - 1]`` norms of consecutive audio-feature differences."""
    a = np.asarray(audio, dtype=np.float64)
    return np.linalg.norm(np.diff(a, axis=0), axis=1)


def lip_energy(frames, lip_mask) -> np.ndarray:
    """``[S - 1]`` mean absolute frame difference inside the lip mask.

    A latent-grid mask is upsampled to the frame size by cell repetition.
    """
    f = np.asarray(frames, dtype=np.float64)
    m = np.asarray(lip_mask, dtype=np.float64)
    if m.sum() == 0:
        raise ValueError("lip mask is empty")
    h, w = f.shape[-2:]
    mh, mw = m.shape
    if h % mh or w % mw:
        raise ValueError(f"mask {m.shape} does not tile frames {h}x{w}")
    up = m.repeat(h // mh, axis=0).repeat(w // mw, axis=1)
    d = np.abs(np.diff(f, axis=0)).mean(axis=1)  # [S-1, H, W]
    return (d * up).sum(axis=(1, 2)) / up.sum()


def _unit(x: np.ndarray) -> np.ndarray:
    x = x - x.mean()
    n = np.linalg.norm(x)
    return x / n if n > 0 else x


def sync_from_energies(audio_e, lip_e, max_offset: int = MAX_OFFSET, min_overlap: int = 3) -> SyncResult:
    """Best Pearson correlation over offsets ``d`` in ``[-max_offset, max_offset]``.

    Offset ``d`` pairs ``audio[i]`` with ``lip[i + d]`` (lip lagging audio by d).
    Ties go to the smaller ``|d|``.  ``sync_d`` is the L2 distance between the
    zero-mean unit-norm overlapping segments at the best offset.
    """
    a = np.asarray(audio_e, dtype=np.float64)
    b = np.asarray(lip_e, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(f"energy sequences must be 1-D and equal length, got {a.shape} and {b.shape}")
    best = None
    for d in sorted(range(-max_offset, max_offset + 1), key=lambda d: (abs(d), d)):
        if abs(d) >= len(a):
            continue
        if d >= 0:
            x, y = a[:len(a) - d], b[d:]
        else:
            x, y = a[-d:], b[:len(b) + d]
        if len(x) < min_overlap:
            continue
        ux, uy = _unit(x), _unit(y)
        corr = float(ux @ uy)
        if best is None or corr > best[0]:
            best = (corr, float(np.linalg.norm(ux - uy)), d)
    if best is None:
        raise ValueError("sequences too short for any offset")
    return SyncResult(*best)


def sync_proxy(audio, frames, lip_mask, max_offset: int = MAX_OFFSET) -> SyncResult:
    """Correlation between audio-feature change and lip-region motion.  Needs S >= 5."""
    a = np.asarray(audio)
    if a.shape[0] < 5 or a.shape[0] != np.asarray(frames).shape[0]:
        raise ValueError("need S >= 5 audio rows and one frame per row")
    return sync_from_energies(audio_energy(a), lip_energy(frames, lip_mask), max_offset)
