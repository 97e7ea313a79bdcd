"""Noise schedule, epsilon-prediction loss, DDIM sampling and dual classifier-free guidance.

Timesteps are 0-based indices ``t in [0, T)``; index ``t`` corresponds to the
1-based step ``t + 1`` of the usual notation.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import htns
from .encoders import ConditionBundle
from .tensor import Tensor, hadamard, mean, no_grad, sub

# eps_fn(z_t, t, passes) -> one prediction per pass; a pass is (use_image, use_audio)
EpsFn = Callable[[np.ndarray, int, Sequence[tuple[bool, bool]]], list]


@dataclass
class NoiseSchedule:
    T: int = 100
    beta_start: float = 1e-4
    beta_end: float = 2e-2
    ddim_steps: int = 10

    def __post_init__(self):
        if self.T < 1:
            raise ValueError("T must be positive")
        if not (0 < self.beta_start <= self.beta_end < 1):
            raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {self.beta_start}, {self.beta_end}")
        if not (1 <= self.ddim_steps <= self.T):
            raise ValueError(f"ddim_steps must lie in [1, {self.T}], got {self.ddim_steps}")
        self.betas = np.linspace(self.beta_start, self.beta_end, self.T)
        self.alpha_bars = np.cumprod(1.0 - self.betas)

    def check_t(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=np.int64)
        if np.any(t < 0) or np.any(t >= self.T):
            raise ValueError(f"timestep out of range [0, {self.T}): {t}")
        return t

    def ddim_timesteps(self, steps: Optional[int] = None) -> np.ndarray:
        """Strictly increasing sub-sequence of length ``steps`` ending at ``T - 1``."""
        n = self.ddim_steps if steps is None else steps
        if not (1 <= n <= self.T):
            raise ValueError(f"DDIM sub-sequence length must lie in [1, {self.T}]")
        stride = self.T // n
        return self.T - 1 - stride * np.arange(n)[::-1]


@dataclass(frozen=True)
class GuidanceScales:
    lambda_a: float = 3.5
    lambda_i: float = 3.5

    def __post_init__(self):
        for v in (self.lambda_a, self.lambda_i):
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"guidance scales must be finite and >= 0, got {v}")


def _coef(sched: NoiseSchedule, t, ndim: int):
    t = sched.check_t(t)
    ab = sched.alpha_bars[t]
    if t.ndim == 0:
        return np.sqrt(ab), np.sqrt(1.0 - ab)
    shape = t.shape + (1,) * (ndim - t.ndim)
    return np.sqrt(ab).reshape(shape), np.sqrt(1.0 - ab).reshape(shape)


def forward_diffuse(z0, t, noise, sched: NoiseSchedule) -> np.ndarray:
    """``sqrt(ab_t) z0 + sqrt(1 - ab_t) noise``; ``t`` may be one index per leading item."""
    z0 = np.asarray(z0.data if isinstance(z0, Tensor) else z0, dtype=np.float64)
    noise = np.asarray(noise.data if isinstance(noise, Tensor) else noise, dtype=np.float64)
    if noise.shape != z0.shape:
        raise ValueError(f"noise shape {noise.shape} differs from z0 shape {z0.shape}")
    a, s = _coef(sched, t, z0.ndim)
    return a * z0 + s * noise


def predict_x0(z_t, eps, t, sched: NoiseSchedule) -> np.ndarray:
    """Invert ``forward_diffuse`` given the noise: ``(z_t - sqrt(1 - ab_t) eps) / sqrt(ab_t)``."""
    z_t, eps = np.asarray(z_t, dtype=np.float64), np.asarray(eps, dtype=np.float64)
    a, s = _coef(sched, t, z_t.ndim)
    return (z_t - s * eps) / a


def training_loss(z0: np.ndarray, eps_model: Callable[[Tensor, np.ndarray], Tensor], sched: NoiseSchedule,
                  rng: np.random.Generator, t=None, noise=None) -> Tensor:
    """Mean squared error between the sampled noise and ``eps_model(z_t, t)``.

    ``z0`` is ``[B, ...]``; one timestep per batch item is drawn uniformly unless given.
    """
    z0 = np.asarray(z0, dtype=np.float64)
    if z0.ndim == 0 or z0.shape[0] == 0:
        raise ValueError("empty batch")
    b = z0.shape[0]
    if t is None:
        t = rng.integers(0, sched.T, size=b)
    if noise is None:
        noise = rng.standard_normal(z0.shape)
    z_t = forward_diffuse(z0, t, noise, sched)
    pred = eps_model(Tensor(z_t), np.asarray(t))
    if pred.shape != z0.shape:
        raise ValueError(f"model output {pred.shape} differs from latent shape {z0.shape}")
    d = sub(pred, Tensor(noise))
    return mean(hadamard(d, d))


def drop_flags(n: int, p_drop: float, rng: np.random.Generator) -> np.ndarray:
    """``[n, 3]`` independent Bernoulli(p) flags for (image, audio, motion)."""
    if not 0.0 <= p_drop <= 1.0:
        raise ValueError(f"p_drop must lie in [0, 1], got {p_drop}")
    return rng.uniform(size=(n, 3)) < p_drop


def condition_dropout(cond: ConditionBundle, p_drop: float, rng: np.random.Generator) -> ConditionBundle:
    f = drop_flags(1, p_drop, rng)[0]
    return cond.replace(drop_face=cond.drop_face or bool(f[0]), drop_audio=cond.drop_audio or bool(f[1]),
                        drop_motion=cond.drop_motion or bool(f[2]))


def guidance_terms(scales: GuidanceScales) -> list[tuple[float, tuple[bool, bool]]]:
    """Non-zero coefficients of the expanded guidance sum, keyed by (image, audio) pass.

    ``e_uu + li (e_iu - e_uu) + la (e_ia - e_iu)`` regrouped as
    ``(1 - li) e_uu + (li - la) e_iu + la e_ia``.
    """
    la, li = scales.lambda_a, scales.lambda_i
    terms = [(1.0 - li, (False, False)), (li - la, (True, False)), (la, (True, True))]
    return [(c, p) for c, p in terms if c != 0.0]


def cfg_epsilon(eps_fn: EpsFn, z_t: np.ndarray, t: int, scales: GuidanceScales) -> np.ndarray:
    """Dual image/audio guidance.  Passes whose coefficient is zero are skipped,
    so ``(1, 1)`` returns the fully conditioned prediction unchanged."""
    terms = guidance_terms(scales)
    if not terms:
        return np.zeros_like(np.asarray(z_t))
    preds = eps_fn(z_t, t, [p for _, p in terms])
    out = None
    for (c, _), e in zip(terms, preds):
        e = np.asarray(e)
        term = e if c == 1.0 else c * e
        out = term if out is None else out + term
    return out


def ddim_step(z_t: np.ndarray, eps: np.ndarray, t: int, t_prev: int, sched: NoiseSchedule) -> np.ndarray:
    x0 = predict_x0(z_t, eps, t, sched)
    if t_prev < 0:
        return x0
    a, s = _coef(sched, t_prev, z_t.ndim)
    return a * x0 + s * eps


def ddim_sample(eps_fn: EpsFn, shape: tuple, sched: NoiseSchedule, scales: GuidanceScales = GuidanceScales(),
                seed: int = 0, z_start: Optional[np.ndarray] = None, start_t: Optional[int] = None,
                dump_dir=None) -> np.ndarray:
    """Deterministic DDIM (eta = 0).

    Starts from seeded standard-normal noise at ``T - 1``, or from ``z_start``
    at ``start_t`` followed by the sub-sequence entries below ``start_t``.
    """
    ts = sched.ddim_timesteps()
    if z_start is None:
        z = np.random.default_rng(seed).standard_normal(shape)
    else:
        z = np.asarray(z_start, dtype=np.float64)
        if z.shape != tuple(shape):
            raise ValueError(f"z_start shape {z.shape} differs from {shape}")
    if start_t is not None:
        sched.check_t(start_t)
        ts = np.concatenate([ts[ts < start_t], [start_t]])
    seq = list(ts[::-1]) + [-1]
    if dump_dir is not None:
        dump_dir = Path(dump_dir)
        dump_dir.mkdir(parents=True, exist_ok=True)
    for i in range(len(seq) - 1):
        t, t_prev = int(seq[i]), int(seq[i + 1])
        eps = cfg_epsilon(eps_fn, z, t, scales)
        z = ddim_step(z, eps, t, t_prev, sched)
        if dump_dir is not None:
            htns.save(dump_dir / f"step_{i:03d}_t{max(t_prev, 0):03d}.htns", z)
    return z


def model_eps_fn(model, cond: ConditionBundle, ref, masks, motion=None, **kw) -> EpsFn:
    """Adapter running each guidance pass of one clip through ``model.forward``.

    Passes run one after another, which keeps peak memory at one forward pass.
    """
    def fn(z_t, t, passes):
        out = []
        with no_grad():
            for img, aud in passes:
                c = cond.replace(drop_face=cond.drop_face or not img, drop_audio=cond.drop_audio or not aud)
                out.append(model.forward(Tensor(z_t), t, c, ref, masks, motion, **kw).data)
        return out

    return fn
