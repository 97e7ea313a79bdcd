"""Run configuration, autoencoder and two-stage denoiser training, incremental
inference, ablation grids and the efficiency harness.

Checkpoints are directories of HTNS tensors plus ``manifest.json``.  Every
run is a pure function of (config, seed, data): no timestamps are recorded.
"""
from __future__ import annotations

import configparser
import csv
import dataclasses
import hashlib
import json
import logging
import subprocess
import time
import tracemalloc
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import htns
from .denoiser import STAGE1_PREFIXES, STAGE2_PREFIXES, Denoiser, DenoiserConfig
from .diffusion import (GuidanceScales, NoiseSchedule, ddim_sample, drop_flags, model_eps_fn,
                        training_loss)
from .encoders import (ConditionBundle, FaceEncoder, LatentSpec, ToyVAE, audio_segment, read_ppm,
                       write_ppm)
from .hadvs import FUSION_MODES
from .maskgen import LandmarkSet, RegionMasks, derive_region_masks
from .metrics import clip_features, frechet_distance, sync_proxy, video_features
from .optim import make_optimizer
from .synth import Corpus
from .tensor import Tensor, backward, hadamard, mean, no_grad, sub

log = logging.getLogger("hallo")

REGION_GRID = {
    "full": ("full",),
    "full+lip": ("full", "lip"),
    "full+exp": ("full", "exp"),
    "full+pose": ("full", "pose"),
    "all": ("pose", "exp", "lip"),
}
WEIGHT_GRID = ((1.0, 1.0, 1.0), (2.0, 1.0, 1.0), (1.0, 2.0, 1.0), (1.0, 1.0, 2.0), (0.0, 0.0, 0.0))
CFG_GRID = ((1.0, 1.0), (1.0, 3.5), (1.0, 6.0), (3.5, 3.5), (6.0, 3.5))  # (lambda_a, lambda_i)
GRIDS = ("regions", "fusion", "weights", "cfg")


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass
class RunConfig:
    stage: str = "stage1"
    seed: int = 0
    steps: int = 500
    batch_size: int = 4
    learning_rate: float = 1e-5
    optimizer: str = "sgd"
    p_drop: float = 0.05
    clip_frames: int = 14
    fps: float = 14 / 5
    smooth_window: int = 50
    holdout: int = 3  # held-out clips per identity
    vae_steps: int = 400
    vae_lr: float = 2e-3
    vae_batch: int = 8
    latent: LatentSpec = field(default_factory=LatentSpec)
    denoiser: DenoiserConfig = field(default_factory=DenoiserConfig)
    region_weights: tuple = (1.0, 1.0, 1.0)
    schedule: NoiseSchedule = field(default_factory=NoiseSchedule)
    guidance: GuidanceScales = field(default_factory=GuidanceScales)
    paths: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.stage not in ("vae", "stage1", "stage2", "infer"):
            raise ValueError(f"unknown stage '{self.stage}'")
        if self.batch_size < 1 or self.steps < 0:
            raise ValueError("batch_size must be >= 1 and steps >= 0")

    def hyper(self) -> dict:
        """Everything except paths and the stage label; this is what gets hashed."""
        d = {f.name: getattr(self, f.name) for f in dataclasses.fields(self) if f.name not in ("paths", "stage")}
        d["latent"] = dataclasses.asdict(self.latent)
        d["denoiser"] = self.denoiser.to_dict()
        d["schedule"] = {k: getattr(self.schedule, k) for k in ("T", "beta_start", "beta_end", "ddim_steps")}
        d["guidance"] = dataclasses.asdict(self.guidance)
        d["region_weights"] = list(self.region_weights)
        return d

    def config_hash(self) -> str:
        blob = json.dumps(self.hyper(), sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def replace(self, **kw) -> "RunConfig":
        return dataclasses.replace(self, **kw)

    def with_denoiser(self, **kw) -> "RunConfig":
        return self.replace(denoiser=dataclasses.replace(self.denoiser, **kw))


def _parse_value(raw: str, like):
    raw = raw.strip()
    if isinstance(like, bool):
        return raw.lower() in ("1", "true", "yes", "on")
    if isinstance(like, int):
        return int(raw)
    if isinstance(like, float):
        return float(raw)
    if isinstance(like, tuple):
        items = [s.strip() for s in raw.replace(",", " ").split()]
        if like and isinstance(like[0], str):
            return tuple(items)
        if like and isinstance(like[0], int) and not isinstance(like[0], bool):
            return tuple(int(s) for s in items)
        return tuple(float(s) for s in items)
    return raw


def _apply(obj, section: dict, where: str):
    kw = {}
    names = {f.name for f in dataclasses.fields(obj)}
    for key, raw in section.items():
        if key not in names:
            raise ValueError(f"unknown key '{key}' in [{where}]")
        kw[key] = _parse_value(raw, getattr(obj, key))
    return dataclasses.replace(obj, **kw)


def load_config(path=None, text: Optional[str] = None) -> RunConfig:
    """Read an INI run-config.

    Sections: ``[run]`` (RunConfig scalars), ``[latent]``, ``[denoiser]``,
    ``[hadvs]`` (fusion, branches, region_weights), ``[schedule]``,
    ``[guidance]`` and ``[paths]``.  Missing keys keep their defaults.
    """
    cp = configparser.ConfigParser()
    cp.optionxform = str  # keys are case-sensitive (e.g. T)
    if path is not None:
        with open(path, encoding="utf-8") as fh:
            cp.read_file(fh, source=str(path))
    if text is not None:
        cp.read_string(text)
    cfg = RunConfig()
    known = {"run", "latent", "denoiser", "hadvs", "schedule", "guidance", "paths"}
    extra = set(cp.sections()) - known
    if extra:
        raise ValueError(f"unknown config sections {sorted(extra)}")
    if cp.has_section("run"):
        cfg = _apply(cfg, dict(cp["run"]), "run")
    if cp.has_section("latent"):
        cfg = cfg.replace(latent=_apply(cfg.latent, dict(cp["latent"]), "latent"))
    den = dict(cp["denoiser"]) if cp.has_section("denoiser") else {}
    if cp.has_section("hadvs"):
        h = dict(cp["hadvs"])
        if "region_weights" in h:
            cfg = cfg.replace(region_weights=_parse_value(h.pop("region_weights"), (1.0,)))
        den.update(h)
    if den:
        cfg = cfg.replace(denoiser=_apply(cfg.denoiser, den, "denoiser"))
    if cp.has_section("schedule"):
        cfg = cfg.replace(schedule=_apply(cfg.schedule, dict(cp["schedule"]), "schedule"))
    if cp.has_section("guidance"):
        cfg = cfg.replace(guidance=_apply(cfg.guidance, dict(cp["guidance"]), "guidance"))
    if cp.has_section("paths"):
        cfg = cfg.replace(paths=dict(cp["paths"]))
    return cfg


# ---------------------------------------------------------------------------
# checkpoints and manifests
# ---------------------------------------------------------------------------

def git_revision() -> str:
    try:
        out = subprocess.run(["git", "rev-parse", "HEAD"], capture_output=True, text=True, timeout=5,
                             cwd=Path(__file__).resolve().parent)
        return out.stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def save_checkpoint(directory, arrays: dict, kind: str, cfg: RunConfig, extra: Optional[dict] = None) -> Path:
    directory = Path(directory)
    meta = {"kind": kind, "config_hash": cfg.config_hash(), "seed": cfg.seed, "git_revision": git_revision(),
            "config": cfg.hyper()}
    meta.update(extra or {})
    htns.save_params(directory, arrays, meta)
    return directory


def load_checkpoint(directory, kind: Optional[str] = None) -> tuple[dict, dict]:
    directory = Path(directory)
    if not (directory / "manifest.json").exists():
        raise FileNotFoundError(f"no checkpoint at {directory}")
    arrays, meta = htns.load_params(directory)
    if kind is not None and meta.get("kind") != kind:
        raise ValueError(f"{directory} holds a '{meta.get('kind')}' checkpoint, expected '{kind}'")
    return arrays, meta


def checkpoint_digest(directory) -> str:
    return file_digest(Path(directory) / "manifest.json")


# ---------------------------------------------------------------------------
# frozen encoders
# ---------------------------------------------------------------------------

@dataclass
class Encoders:
    vae: ToyVAE
    face: FaceEncoder

    def arrays(self) -> dict:
        d = dict(self.vae.params.arrays())
        d.update(self.face.params.arrays())
        return d


def face_targets(n_ids: int, d_f: int, seed: int) -> np.ndarray:
    """Fixed unit-norm identity targets (orthonormal when ``n_ids <= d_f``)."""
    g = np.random.default_rng([seed, 404]).standard_normal((d_f, max(n_ids, 1)))
    q, _ = np.linalg.qr(g) if n_ids <= d_f else (g / np.linalg.norm(g, axis=0), None)
    return q[:, :n_ids].T.copy()


def train_vae(cfg: RunConfig, corpus: Corpus) -> tuple[Encoders, list[float]]:
    """Fit the autoencoder (reconstruction MSE) and the face encoder (regression
    onto fixed per-identity unit vectors) on the corpus frames."""
    rng = np.random.default_rng([cfg.seed, 11])
    vae = ToyVAE(cfg.latent, seed=cfg.seed)
    face = FaceEncoder(cfg.latent, d_f=cfg.denoiser.d_f, seed=cfg.seed)
    frames = [(c.identity, c.frames) for c in corpus.clips]
    targets = face_targets(len(corpus.landmarks), cfg.denoiser.d_f, cfg.seed)
    params = vae.params.select() + face.params.select()
    opt = make_optimizer("adam", params, cfg.vae_lr)
    losses = []
    for step in range(cfg.vae_steps):
        ci = rng.integers(0, len(frames), cfg.vae_batch)
        fi = rng.integers(0, frames[0][1].shape[0], cfg.vae_batch)
        x = np.stack([frames[c][1][f] for c, f in zip(ci, fi)]).astype(np.float64)
        ids = np.array([frames[c][0] for c in ci])
        opt.zero_grad()
        xt = Tensor(x)
        d = sub(vae.decode(vae.encode(xt), clamp=False), xt)
        rec = mean(hadamard(d, d))
        e = sub(face(xt), Tensor(targets[ids]))
        loss = rec + mean(hadamard(e, e))
        _check_finite(loss, step, "vae")
        backward(loss)
        opt.step()
        losses.append(rec.item())
    sample = np.stack([c.frames[0] for c in corpus.clips]).astype(np.float64)
    vae.fit_latent_scale(sample)
    return Encoders(vae, face), losses


def save_encoders(directory, enc: Encoders, cfg: RunConfig, extra: Optional[dict] = None) -> Path:
    meta = {"latent_scale": enc.vae.latent_scale}
    meta.update(extra or {})
    return save_checkpoint(directory, enc.arrays(), "vae", cfg, meta)


def load_encoders(directory, cfg: RunConfig) -> Encoders:
    arrays, meta = load_checkpoint(directory, "vae")
    vae = ToyVAE(cfg.latent, seed=cfg.seed)
    face = FaceEncoder(cfg.latent, d_f=cfg.denoiser.d_f, seed=cfg.seed)
    vae.params.load_arrays(arrays, strict=False)
    face.params.load_arrays(arrays, strict=False)
    missing = [n for n in vae.params.names() + face.params.names() if n not in arrays]
    if missing:
        raise KeyError(f"encoder checkpoint lacks {missing[:3]}")
    vae.latent_scale = float(meta["latent_scale"])
    return Encoders(vae, face)


# ---------------------------------------------------------------------------
# training data
# ---------------------------------------------------------------------------

@dataclass
class TrainData:
    """Corpus frames pushed through the frozen encoders.

    Latents are rounded to float32 so that cached and fresh encodings agree bitwise.
    """
    latents: np.ndarray  # [clips, F, D_z, H_z, W_z]
    faces: np.ndarray  # [clips, F, D_f]
    audio: np.ndarray  # [clips, F, 12 * d_raw]
    identity: np.ndarray  # [clips]
    masks: dict  # identity -> RegionMasks
    train_idx: np.ndarray
    eval_idx: np.ndarray
    fps: float


def encode_frames(enc: Encoders, frames: np.ndarray, chunk: int = 64) -> tuple[np.ndarray, np.ndarray]:
    zs, fs = [], []
    with no_grad():
        for i in range(0, len(frames), chunk):
            x = Tensor(np.asarray(frames[i:i + chunk], dtype=np.float64))
            zs.append(enc.vae.encode(x).data)
            fs.append(enc.face(x).data)
    z = np.concatenate(zs).astype(np.float32).astype(np.float64)
    return z, np.concatenate(fs)


def split_indices(identity: np.ndarray, holdout: int) -> tuple[np.ndarray, np.ndarray]:
    """Last ``holdout`` clips of each identity are held out; the eval list interleaves identities."""
    train, per_id = [], []
    for i in np.unique(identity):
        idx = np.flatnonzero(identity == i)
        train.extend(idx[:len(idx) - holdout])
        per_id.append(idx[len(idx) - holdout:])
    ev = [int(p[j]) for j in range(holdout) for p in per_id if j < len(p)]
    return np.asarray(train, dtype=np.int64), np.asarray(ev, dtype=np.int64)


def prepare_data(cfg: RunConfig, corpus: Corpus, enc: Encoders) -> TrainData:
    frames = np.stack([c.frames for c in corpus.clips])
    n, f = frames.shape[:2]
    z, faces = encode_frames(enc, frames.reshape((n * f,) + frames.shape[2:]))
    identity = np.array([c.identity for c in corpus.clips])
    lat = cfg.latent
    masks = {i: derive_region_masks(lm, (lat.h_z, lat.w_z)) for i, lm in corpus.landmarks.items()}
    train, ev = split_indices(identity, cfg.holdout)
    return TrainData(z.reshape((n, f) + z.shape[1:]), faces.reshape(n, f, -1),
                     np.stack([c.audio for c in corpus.clips]), identity, masks, train, ev, corpus.fps)


# ---------------------------------------------------------------------------
# denoiser training
# ---------------------------------------------------------------------------

def _check_finite(loss: Tensor, step: int, what: str) -> None:
    if not np.isfinite(loss.item()):
        raise FloatingPointError(f"{what}: non-finite loss {loss.item()} at step {step}; "
                                 f"lower the learning rate or check the input data")


def build_denoiser(cfg: RunConfig) -> Denoiser:
    return Denoiser(cfg.denoiser, cfg.latent, seed=cfg.seed, region_weights=cfg.region_weights)


def smoothed(losses: Sequence[float], window: int) -> tuple[float, float]:
    """Mean of the first and of the last ``window`` losses."""
    a = np.asarray(losses, dtype=np.float64)
    if len(a) == 0:
        raise ValueError("no losses recorded")
    w = max(1, min(window, len(a)))
    return float(a[:w].mean()), float(a[-w:].mean())


@dataclass
class TrainResult:
    model: Denoiser
    losses: list[float]
    frozen_digest_before: str
    frozen_digest_after: str

    def smoothed(self, window: int) -> tuple[float, float]:
        return smoothed(self.losses, window)


def _frozen_digest(model: Denoiser, prefixes) -> str:
    h = hashlib.sha256()
    for name, t in model.params.items():
        if not any(name.startswith(p) for p in prefixes):
            h.update(name.encode())
            h.update(np.ascontiguousarray(t.data).tobytes())
    return h.hexdigest()


def _fit(model: Denoiser, cfg: RunConfig, prefixes, step_loss: Callable[[np.random.Generator], Tensor],
         stream: int, progress: Optional[Callable[[int, float], None]] = None) -> TrainResult:
    model.params.set_trainable(prefixes)
    trainable = [t for _, t in model.params.trainable()]
    opt = make_optimizer(cfg.optimizer, trainable, cfg.learning_rate)
    rng = np.random.default_rng([cfg.seed, stream])
    before = _frozen_digest(model, prefixes)
    losses = []
    for step in range(cfg.steps):
        opt.zero_grad()
        loss = step_loss(rng)
        _check_finite(loss, step, f"stage {stream}")
        backward(loss)
        opt.step()
        losses.append(loss.item())
        if progress is not None:
            progress(step, losses[-1])
    model.params.set_trainable(())
    return TrainResult(model, losses, before, _frozen_digest(model, prefixes))


def train_stage1(cfg: RunConfig, data: TrainData, model: Optional[Denoiser] = None, progress=None) -> TrainResult:
    """Spatial blocks, reference network and face attention on (reference, target) frame pairs."""
    model = model or build_denoiser(cfg)
    b = cfg.batch_size
    n_frames = data.latents.shape[1]

    def step_loss(rng):
        idx = data.train_idx[rng.integers(0, len(data.train_idx), b)]
        r = rng.integers(0, n_frames, b)
        q = rng.integers(0, n_frames, b)
        flags = drop_flags(b, cfg.p_drop, rng)
        ref = model.reference(Tensor(data.latents[idx, r]))
        c_exp = Tensor(data.faces[idx, r])
        z0 = data.latents[idx, q][:, None]

        def eps(z_t, t):
            return model.forward_batch(z_t, t, c_exp, None, ref, None, None, drop_face=flags[:, 0],
                                       use_hadvs=False, use_temporal=False)

        return training_loss(z0, eps, cfg.schedule, rng)

    return _fit(model, cfg, STAGE1_PREFIXES, step_loss, 1, progress)


def stage2_from(cfg: RunConfig, stage1_arrays: dict) -> Denoiser:
    """A fresh stage-2 model carrying the stage-1 weights."""
    model = build_denoiser(cfg)
    subset = {n: a for n, a in stage1_arrays.items() if any(n.startswith(p) for p in STAGE1_PREFIXES)}
    missing = [n for n in model.params.names(STAGE1_PREFIXES) if n not in subset]
    if missing:
        raise KeyError(f"stage-1 checkpoint lacks {missing[:3]}")
    model.params.load_arrays(subset, strict=False)
    return model


def clip_masks(data: TrainData, idx: np.ndarray) -> RegionMasks:
    return RegionMasks.stack([data.masks[int(data.identity[i])] for i in idx])


def train_stage2(cfg: RunConfig, data: TrainData, model: Denoiser, progress=None) -> TrainResult:
    """HADVS, temporal attention and the audio projector on S-frame clips with
    ground-truth motion frames; spatial modules stay frozen."""
    b, s, k = cfg.batch_size, cfg.clip_frames, cfg.denoiser.motion_frames
    n_frames = data.latents.shape[1]
    if n_frames < k + s:
        raise ValueError(f"corpus clips have {n_frames} frames; stage 2 needs k + S = {k + s}")

    def step_loss(rng):
        idx = data.train_idx[rng.integers(0, len(data.train_idx), b)]
        start = rng.integers(k, n_frames - s + 1, b)
        r = rng.integers(0, n_frames, b)
        flags = drop_flags(b, cfg.p_drop, rng)
        ref = model.reference(Tensor(data.latents[idx, r]))
        motion = Tensor(np.stack([data.latents[i, st - k:st] for i, st in zip(idx, start)]))
        z0 = np.stack([data.latents[i, st:st + s] for i, st in zip(idx, start)])
        raw = np.stack([audio_segment(data.audio[i], st, s, data.fps) for i, st in zip(idx, start)])
        c_audio = model.audio(Tensor(raw))
        c_exp = Tensor(data.faces[idx, r])
        masks = clip_masks(data, idx)

        def eps(z_t, t):
            return model.forward_batch(z_t, t, c_exp, c_audio, ref, masks, motion, drop_face=flags[:, 0],
                                       drop_audio=flags[:, 1], drop_motion=flags[:, 2])

        return training_loss(z0, eps, cfg.schedule, rng)

    return _fit(model, cfg, STAGE2_PREFIXES, step_loss, 2, progress)


def save_denoiser(directory, result: TrainResult, cfg: RunConfig, stage: int, inputs: dict) -> Path:
    directory = Path(directory)
    init, final = result.smoothed(cfg.smooth_window)
    save_checkpoint(directory, result.model.params.arrays(), f"stage{stage}", cfg,
                    {"inputs": inputs, "smoothed_initial": init, "smoothed_final": final,
                     "denoiser_hash": result.model.config_hash()})
    with open(directory / "losses.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "loss"])
        for i, v in enumerate(result.losses):
            w.writerow([i, repr(v)])
    return directory


def load_denoiser(directory, cfg: RunConfig) -> Denoiser:
    arrays, meta = load_checkpoint(directory)
    if meta.get("kind") not in ("stage1", "stage2"):
        raise ValueError(f"{directory} is not a denoiser checkpoint")
    model = build_denoiser(cfg)
    model.params.load_arrays(arrays)
    return model


# ---------------------------------------------------------------------------
# inference
# ---------------------------------------------------------------------------

@dataclass
class Animation:
    frames: np.ndarray  # [total, 3, H_I, W_I]
    latents: np.ndarray  # [total, D_z, H_z, W_z]
    motion_inputs: list  # per clip: None or [k, D_z, H_z, W_z]
    manifest: dict


def _digest(a: Optional[np.ndarray]) -> Optional[str]:
    if a is None:
        return None
    return hashlib.sha256(np.ascontiguousarray(a, dtype=np.float64).tobytes()).hexdigest()


def clip_bounds(total: int, s: int) -> list[tuple[int, int]]:
    if total < 1:
        raise ValueError("total_frames must be >= 1")
    return [(a, min(a + s, total)) for a in range(0, total, s)]


def animate(cfg: RunConfig, model: Denoiser, enc: Encoders, reference_image: np.ndarray,
            landmarks: LandmarkSet, audio_features: np.ndarray, total_frames: int,
            pad_audio: bool = False, out_dir=None, dump_steps=None, use_hadvs: Optional[bool] = None) -> Animation:
    """Generate ``total_frames`` frames as consecutive clips of ``cfg.clip_frames``.

    Clip ``c > 0`` is conditioned on the last ``k`` latents generated so far.
    """
    audio_features = np.asarray(audio_features, dtype=np.float64)
    if audio_features.ndim != 2:
        raise ValueError("audio features must be [L, 12 * d_raw]")
    if audio_features.shape[0] < total_frames and not pad_audio:
        raise ValueError(f"audio timeline has {audio_features.shape[0]} frames, video needs {total_frames} "
                         f"(pass pad_audio to zero-pad)")
    s, k = cfg.clip_frames, cfg.denoiser.motion_frames
    lat = cfg.latent
    with no_grad():
        img = Tensor(np.asarray(reference_image, dtype=np.float64))
        z_ref = enc.vae.encode(img)
        c_exp = enc.face(img)
        ref = model.reference(z_ref)
    masks = derive_region_masks(landmarks, (lat.h_z, lat.w_z))

    latents, motions, clips = [], [], []
    for c, (a, e) in enumerate(clip_bounds(total_frames, s)):
        n = e - a
        raw = audio_segment(audio_features, a, n, cfg.fps)
        with no_grad():
            c_audio = model.audio(Tensor(raw))
        cond = ConditionBundle(c_exp, c_audio)
        done = np.concatenate(latents) if latents else np.zeros((0,) + lat.latent_shape)
        motion = done[-k:].copy() if (k and len(done) >= k) else None
        seed = cfg.seed * 1000 + c
        eps_fn = model_eps_fn(model, cond, ref, masks, None if motion is None else Tensor(motion),
                              use_hadvs=use_hadvs)
        dump = None if dump_steps is None else Path(dump_steps) / f"clip{c:03d}"
        z = ddim_sample(eps_fn, (n,) + lat.latent_shape, cfg.schedule, cfg.guidance, seed=seed, dump_dir=dump)
        latents.append(z)
        motions.append(motion)
        clips.append({"index": c, "start": a, "end": e, "seed": seed, "motion_frames": 0 if motion is None else k,
                      "motion_sha256": _digest(motion), "final_latents_sha256": _digest(z[-k:]) if k else None})
    z_all = np.concatenate(latents)
    with no_grad():
        frames = np.concatenate([enc.vae.decode(Tensor(z_all[i:i + 32])).data for i in range(0, len(z_all), 32)])
    manifest = {"config_hash": cfg.config_hash(), "seed": cfg.seed, "git_revision": git_revision(),
                "total_frames": int(total_frames), "clip_frames": s, "motion_frames": k, "clips": clips,
                "audio_sha256": _digest(audio_features)}
    anim = Animation(frames, z_all, motions, manifest)
    if out_dir is not None:
        write_animation(out_dir, anim)
    return anim


def write_animation(out_dir, anim: Animation) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for i, f in enumerate(anim.frames):
        write_ppm(out / f"frame_{i:04d}.ppm", f)
    htns.save(out / "latents.htns", anim.latents)
    for c, m in enumerate(anim.motion_inputs):
        if m is not None:
            htns.save(out / f"motion_{c:03d}.htns", m)
    (out / "manifest.json").write_text(json.dumps(anim.manifest, indent=1, sort_keys=True))
    return out


def read_frames(directory) -> np.ndarray:
    files = sorted(Path(directory).glob("frame_*.ppm"))
    if not files:
        raise FileNotFoundError(f"no frame_*.ppm files in {directory}")
    return np.stack([read_ppm(f) for f in files])


# ---------------------------------------------------------------------------
# evaluation and ablations
# ---------------------------------------------------------------------------

def generate_eval_clip(cfg: RunConfig, model: Denoiser, enc: Encoders, corpus: Corpus, data: TrainData,
                       clip: int, use_hadvs=None) -> tuple[np.ndarray, np.ndarray]:
    """Generate the S target frames of a corpus clip from its first frame and its audio.

    Returns ``(generated, ground_truth)`` pixel frames.
    """
    rec = corpus.clips[clip]
    k, s = cfg.denoiser.motion_frames, cfg.clip_frames
    anim = animate(cfg.replace(fps=data.fps), model, enc,
                   rec.frames[0].astype(np.float64), corpus.landmarks[rec.identity], rec.audio[k:k + s], s,
                   use_hadvs=use_hadvs)
    return anim.frames, rec.frames[k:k + s].astype(np.float64)


def evaluate(cfg: RunConfig, model: Denoiser, enc: Encoders, corpus: Corpus, data: TrainData,
             clips: Optional[Sequence[int]] = None, use_hadvs=None) -> dict:
    """Per-clip sync proxies plus Fréchet distances of generated vs ground-truth frames."""
    clips = list(data.eval_idx if clips is None else clips)
    k, s = cfg.denoiser.motion_frames, cfg.clip_frames
    gen, gt, sync_c, sync_d = [], [], [], []
    for c in clips:
        g, r = generate_eval_clip(cfg, model, enc, corpus, data, c, use_hadvs)
        rec = corpus.clips[c]
        res = sync_proxy(rec.audio[k:k + s], g, data.masks[rec.identity].m_lip)
        sync_c.append(res.sync_c)
        sync_d.append(res.sync_d)
        gen.append(g)
        gt.append(r)
    gen_a, gt_a = np.stack(gen), np.stack(gt)
    fid = frechet_distance(clip_features(gen_a.reshape((-1,) + gen_a.shape[2:])),
                           clip_features(gt_a.reshape((-1,) + gt_a.shape[2:])))
    fvd = frechet_distance(video_features(gen_a), video_features(gt_a)) if len(clips) >= 2 else float("nan")
    return {"clips": clips, "sync_c": sync_c, "sync_d": sync_d, "syncC_proxy": float(np.mean(sync_c)),
            "syncD_proxy": float(np.mean(sync_d)), "fid_proxy": fid, "fvd_proxy": fvd}


def ablation_grid(cfg: RunConfig, grid: str, enc: Encoders, corpus: Corpus, data: TrainData,
                  stage1_arrays: Optional[dict] = None, model: Optional[Denoiser] = None,
                  clips: Optional[Sequence[int]] = None, progress=None) -> list[dict]:
    """One metrics row per grid cell.

    ``regions`` and ``fusion`` change the architecture, so each cell runs its
    own stage-2 training from ``stage1_arrays`` with the same budget.
    ``weights`` and ``cfg`` are inference-time settings applied to ``model``.
    """
    if grid not in GRIDS:
        raise ValueError(f"unknown grid '{grid}' (choose from {', '.join(GRIDS)})")
    rows = []
    if grid in ("regions", "fusion"):
        if stage1_arrays is None:
            raise ValueError(f"the {grid} grid needs a stage-1 checkpoint")
        cells = REGION_GRID.items() if grid == "regions" else ((m, None) for m in FUSION_MODES)
        for name, branches in cells:
            c = cfg.with_denoiser(branches=branches) if grid == "regions" else cfg.with_denoiser(fusion=name)
            res = train_stage2(c, data, stage2_from(c, stage1_arrays), progress)
            rows.append({"grid": grid, "cell": name, **_metric_row(evaluate(c, res.model, enc, corpus, data, clips))})
    else:
        if model is None:
            raise ValueError(f"the {grid} grid needs a trained stage-2 model")
        if grid == "weights":
            for w in WEIGHT_GRID:
                model.region_weights = tuple(w)
                rows.append({"grid": grid, "cell": "lip={} exp={} pose={}".format(*w),
                             **_metric_row(evaluate(cfg, model, enc, corpus, data, clips))})
            model.region_weights = tuple(cfg.region_weights)
        else:
            for la, li in CFG_GRID:
                c = cfg.replace(guidance=GuidanceScales(la, li))
                rows.append({"grid": grid, "cell": f"lambda_a={la} lambda_i={li}",
                             **_metric_row(evaluate(c, model, enc, corpus, data, clips))})
    return rows


def _metric_row(ev: dict) -> dict:
    return {k: ev[k] for k in ("syncC_proxy", "syncD_proxy", "fid_proxy", "fvd_proxy")}


def write_csv(path, rows: list[dict], header_note: Optional[str] = None) -> None:
    if not rows:
        raise ValueError("nothing to write")
    with open(path, "w", newline="") as fh:
        if header_note:
            fh.write(f"# {header_note}\n")
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)


# ---------------------------------------------------------------------------
# efficiency harness
# ---------------------------------------------------------------------------

def profile(cfg: RunConfig, resolutions: Sequence[int] = (8, 16, 32), arrays: Optional[dict] = None,
            repeats: int = 1, landmarks: Optional[LandmarkSet] = None) -> list[dict]:
    """Wall time and peak traced memory of one inference clip per latent size, with and without HADVS.

    Weights do not depend on the latent size except for the null latents, so
    a checkpoint (``arrays``) is loaded non-strictly.  Time is the minimum
    over ``repeats``.
    """
    from .synth import identity_landmarks, make_identity
    lm = landmarks or identity_landmarks(make_identity(0, cfg.seed))
    rows = []
    for r in resolutions:
        lat = LatentSpec(r, r, cfg.latent.d_z, cfg.latent.h_i, cfg.latent.w_i)
        c = cfg.replace(latent=lat)
        model = build_denoiser(c)
        if arrays is not None:
            ok = {n: a for n, a in arrays.items() if n in model.params and model.params[n].shape == a.shape}
            model.params.load_arrays(ok, strict=False)
        masks = derive_region_masks(lm, (r, r))
        rng = np.random.default_rng([cfg.seed, 77])
        cond = ConditionBundle(Tensor(rng.standard_normal(cfg.denoiser.d_f)),
                               Tensor(rng.standard_normal((cfg.clip_frames, cfg.denoiser.d_a))))
        with no_grad():
            ref = model.reference(Tensor(rng.standard_normal(lat.latent_shape)))
        motion = Tensor(rng.standard_normal((cfg.denoiser.motion_frames,) + lat.latent_shape))
        for use_hadvs in (True, False):
            fn = model_eps_fn(model, cond, ref, masks, motion, use_hadvs=use_hadvs)
            best_t, peak = float("inf"), 0
            for _ in range(repeats):
                tracemalloc.start()
                t0 = time.perf_counter()
                ddim_sample(fn, (cfg.clip_frames,) + lat.latent_shape, cfg.schedule, cfg.guidance, seed=cfg.seed)
                best_t = min(best_t, time.perf_counter() - t0)
                peak = max(peak, tracemalloc.get_traced_memory()[1])
                tracemalloc.stop()
            rows.append({"resolution": f"{r}x{r}", "hadvs": use_hadvs, "seconds": best_t, "peak_bytes": peak})
    return rows
