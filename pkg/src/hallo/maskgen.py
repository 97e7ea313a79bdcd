"""Lip / expression / pose masks on the latent grid from facial landmarks.

Landmark files are plain text, one ``key = value`` entry per line::

    # comments and blank lines are ignored
    image_size = 64 64            # H W
    lip = 28,40 36,40 32,44       # x,y pairs separated by whitespace
    exp = 14,18 50,18 32,48

Coordinates are pixels in ``[0, W) x [0, H)``.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import htns
from .tensor import Tensor

Point = tuple[float, float]


class LandmarkError(ValueError):
    pass


@dataclass(frozen=True)
class LandmarkSet:
    lip_points: tuple[Point, ...]
    exp_points: tuple[Point, ...]
    image_size: tuple[int, int]  # (H_I, W_I)

    def __post_init__(self):
        h, w = self.image_size
        for name, pts in (("lip", self.lip_points), ("exp", self.exp_points)):
            if not pts:
                raise LandmarkError(f"{name} point list is empty")
            for x, y in pts:
                if not (0 <= x < w and 0 <= y < h):
                    raise LandmarkError(f"{name} point ({x}, {y}) outside image {w}x{h}")


@dataclass
class RegionMasks:
    y_lip: np.ndarray
    y_exp: np.ndarray
    m_lip: np.ndarray
    m_exp: np.ndarray
    m_pose: np.ndarray

    @property
    def latent_size(self) -> tuple[int, int]:
        return self.m_lip.shape[-2:]

    @classmethod
    def stack(cls, masks: Sequence["RegionMasks"]) -> "RegionMasks":
        """Batch several mask sets along a new leading axis."""
        return cls(*(np.stack([getattr(m, f) for m in masks])
                     for f in ("y_lip", "y_exp", "m_lip", "m_exp", "m_pose")))

    def as_dict(self) -> dict[str, np.ndarray]:
        return {"Y_lip": self.y_lip, "Y_exp": self.y_exp, "M_lip": self.m_lip,
                "M_exp": self.m_exp, "M_pose": self.m_pose}

    def tensors(self) -> dict[str, Tensor]:
        return {k: Tensor(v) for k, v in self.as_dict().items()}

    def downsample(self, factor: int) -> "RegionMasks":
        """Max-pool every mask by ``factor`` (a cell is 1 if any covered cell is 1).

        Y masks are pooled directly; M masks are re-derived so the region
        algebra still holds at the coarser grid.
        """
        if factor == 1:
            return self
        y_lip = _maxpool(self.y_lip, factor)
        y_exp = _maxpool(self.y_exp, factor)
        return _derive(y_lip, y_exp)

    @classmethod
    def full_only(cls, latent_size: tuple[int, int]) -> "RegionMasks":
        """Masks that reduce HADVS to a single full-frame branch."""
        zeros = np.zeros(tuple(latent_size))
        ones = np.ones(tuple(latent_size))
        return cls(zeros.copy(), zeros.copy(), zeros.copy(), zeros.copy(), ones)


def _maxpool(m: np.ndarray, f: int) -> np.ndarray:
    h, w = m.shape[-2:]
    if h % f or w % f:
        raise ValueError(f"mask {m.shape} not divisible by {f}")
    return m.reshape(m.shape[:-2] + (h // f, f, w // f, f)).max(axis=(-3, -1))


def rasterize_box_mask(points: Sequence[Point], image_size: tuple[int, int],
                       latent_size: tuple[int, int]) -> np.ndarray:
    """Binary mask of the landmarks' bounding box on the latent grid.

    The box is scaled by ``(H_z / H_I, W_z / W_I)`` and a cell is set when its
    center lies inside the scaled box, boundaries included.  The cell holding
    each landmark is also set, which keeps tiny boxes non-empty and keeps the
    mask monotone in the point set.
    """
    if not points:
        raise LandmarkError("empty point list")
    hz, wz = latent_size
    if hz < 1 or wz < 1:
        raise ValueError(f"degenerate latent size {latent_size}")
    hi, wi = image_size
    xs = np.array([p[0] for p in points], dtype=float) * (wz / wi)
    ys = np.array([p[1] for p in points], dtype=float) * (hz / hi)

    cy = np.arange(hz) + 0.5
    cx = np.arange(wz) + 0.5
    rows = (cy >= ys.min()) & (cy <= ys.max())
    cols = (cx >= xs.min()) & (cx <= xs.max())
    mask = np.outer(rows, cols).astype(np.float64)
    iy = np.minimum(np.floor(ys).astype(int), hz - 1)
    ix = np.minimum(np.floor(xs).astype(int), wz - 1)
    mask[iy, ix] = 1.0
    return mask


def _derive(y_lip: np.ndarray, y_exp: np.ndarray) -> RegionMasks:
    m_lip = y_lip.copy()
    m_exp = (1.0 - m_lip) * y_exp
    m_pose = 1.0 - m_exp
    return RegionMasks(y_lip, y_exp, m_lip, m_exp, m_pose)


def derive_region_masks(lm: LandmarkSet, latent_size: tuple[int, int]) -> RegionMasks:
    y_lip = rasterize_box_mask(lm.lip_points, lm.image_size, latent_size)
    y_exp = rasterize_box_mask(lm.exp_points, lm.image_size, latent_size)
    return _derive(y_lip, y_exp)


# ---------------------------------------------------------------------------
# landmark files
# ---------------------------------------------------------------------------

def parse_landmarks(text: str, source: str = "<string>") -> LandmarkSet:
    fields: dict[str, tuple[int, str]] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise LandmarkError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in ("image_size", "lip", "exp"):
            raise LandmarkError(f"{source}:{lineno}: unknown field '{key}'")
        if key in fields:
            raise LandmarkError(f"{source}:{lineno}: duplicate field '{key}'")
        fields[key] = (lineno, value)
    for key in ("image_size", "lip", "exp"):
        if key not in fields:
            raise LandmarkError(f"{source}: missing field '{key}'")

    lineno, value = fields["image_size"]
    try:
        h, w = (int(v) for v in value.split())
    except ValueError:
        raise LandmarkError(f"{source}:{lineno}: image_size must be two integers 'H W'") from None

    def points(key):
        lineno, value = fields[key]
        out = []
        for tok in value.split():
            try:
                x, y = (float(v) for v in tok.split(","))
            except ValueError:
                raise LandmarkError(f"{source}:{lineno}: bad point '{tok}' in '{key}'") from None
            out.append((x, y))
        return tuple(out)

    try:
        return LandmarkSet(points("lip"), points("exp"), (h, w))
    except LandmarkError as e:
        raise LandmarkError(f"{source}: {e}") from None


def load_landmarks(path) -> LandmarkSet:
    path = Path(path)
    return parse_landmarks(path.read_text(encoding="utf-8"), str(path))


def format_landmarks(lm: LandmarkSet) -> str:
    def fmt(pts):
        return " ".join(f"{x:g},{y:g}" for x, y in pts)

    h, w = lm.image_size
    return f"image_size = {h} {w}\nlip = {fmt(lm.lip_points)}\nexp = {fmt(lm.exp_points)}\n"


def write_pgm(path, mask: np.ndarray, cell: int = 8) -> None:
    """Binary PGM (P5) rendering of a 0/1 mask, each cell drawn ``cell`` px wide."""
    img = (np.kron(mask, np.ones((cell, cell))) * 255).astype(np.uint8)
    h, w = img.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + img.tobytes())


def export_masks(masks: RegionMasks, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name, arr in masks.as_dict().items():
        htns.save(out / f"{name}.htns", arr)
        write_pgm(out / f"{name}.pgm", arr)
