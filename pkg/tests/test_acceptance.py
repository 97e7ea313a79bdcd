"""Acceptance suite: one test per criterion, printed as PASS/FAIL lines by conftest.

Criteria 6, 7, 8 and 10 share one desk-scale world (synthetic corpus, frozen
encoders, stage-1 and stage-2 checkpoints) built once per session through the
``hallo`` command line.  Expect roughly a quarter of an hour on one CPU core.
"""
import json
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from hallo import htns
from hallo.attention import AttentionParams, cross_attention
from hallo.denoiser import Denoiser, DenoiserConfig
from hallo.diffusion import (GuidanceScales, NoiseSchedule, cfg_epsilon, ddim_sample, forward_diffuse,
                             model_eps_fn, predict_x0)
from hallo.encoders import ConditionBundle, LatentSpec
from hallo.hadvs import HadvsConfig, hadvs_forward
from hallo.maskgen import LandmarkSet, derive_region_masks
from hallo.metrics import FeatureSet, frechet_distance
from hallo.nn import conv3x3
from hallo.pipeline import (RunConfig, animate, evaluate, load_config, load_denoiser, load_encoders, prepare_data,
                            profile)
from hallo.synth import load_corpus
from hallo.tensor import (Conv1x1Params, LinearParams, Tensor, check_gradients, conv1x1_forward, hadamard,
                          linear_forward, no_grad, tensor_sum)

from oracles import box_mask, dense_attention, frechet_1d, region_masks

ROOT = Path(__file__).resolve().parents[1]
DESK = ROOT / "configs" / "desk.ini"
EVAL_CLIPS = 10


def hallo(*args):
    """Run the command line in a fresh interpreter; fail loudly on a non-zero exit."""
    cmd = [sys.executable, "-m", "hallo.cli", *map(str, args)]
    res = subprocess.run(cmd, capture_output=True, text=True)
    assert res.returncode == 0, f"{' '.join(cmd)}\n{res.stdout}\n{res.stderr}"
    return res.stdout


def losses(ckpt: Path) -> np.ndarray:
    rows = (ckpt / "losses.csv").read_text().splitlines()[1:]
    return np.array([float(r.split(",")[1]) for r in rows])


def smoothed_ratio(values, window=50):
    return values[-window:].mean() / values[:window].mean()


def dir_bytes(d: Path) -> dict:
    return {p.name: p.read_bytes() for p in sorted(d.iterdir()) if p.is_file()}


# ---------------------------------------------------------------------------
# shared desk-scale world
# ---------------------------------------------------------------------------

@pytest.fixture(scope="session")
def world(tmp_path_factory):
    root = tmp_path_factory.mktemp("desk")
    hallo("synth", "--ids", 4, "--clips", 64, "--frames", 16, "--seed", 0, "--out", root / "corpus")
    hallo("train-vae", "--config", DESK, "--data", root / "corpus", "--out", root / "vae")
    t = time.perf_counter()
    hallo("train", "--stage", 1, "--config", DESK, "--data", root / "corpus", "--vae", root / "vae",
          "--out", root / "s1a")
    stage1_seconds = time.perf_counter() - t
    cfg = load_config(DESK)
    corpus = load_corpus(root / "corpus")
    # a held-out clip of identity 0 provides the reference frame; audio is three clips back to back
    ref_clip = corpus.by_identity(0)[-1]
    (root / "ref.ppm").write_bytes((ref_clip.path / "frame_0000.ppm").read_bytes())
    audio = np.concatenate([c.audio for c in corpus.by_identity(0)[-3:]])
    htns.save(root / "audio.htns", audio)
    return dict(root=root, cfg=cfg, corpus=corpus, stage1_seconds=stage1_seconds)


@pytest.fixture(scope="session")
def stage2(world):
    """Identical stage-2 budgets for the all-regions model and the full-attention-only model."""
    root = world["root"]
    full_cfg = root / "desk_full.ini"
    full_cfg.write_text(DESK.read_text().replace("branches = pose, exp, lip", "branches = full"))
    out = {}
    for name, config in (("all", DESK), ("full", full_cfg)):
        t = time.perf_counter()
        hallo("train", "--stage", 2, "--config", config, "--batch-size", 2, "--data", root / "corpus",
              "--vae", root / "vae", "--stage1", root / "s1a", "--out", root / f"s2_{name}")
        out[name] = (root / f"s2_{name}", load_config(config).replace(batch_size=2), time.perf_counter() - t)
    return out


# ---------------------------------------------------------------------------
# 1-5: algebra and oracles
# ---------------------------------------------------------------------------

def test_criterion_01_mask_algebra(record_property):
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    n = 10_000
    for _ in range(n):
        hi, wi = (int(v) for v in rng.integers(8, 129, 2))
        hz, wz = (int(v) for v in rng.integers(1, 17, 2))
        lip = [(float(rng.uniform(0, wi)), float(rng.uniform(0, hi))) for _ in range(rng.integers(1, 7))]
        exp = [(float(rng.uniform(0, wi)), float(rng.uniform(0, hi))) for _ in range(rng.integers(1, 7))]
        lip = [(min(x, wi - 1e-9), min(y, hi - 1e-9)) for x, y in lip]
        exp = [(min(x, wi - 1e-9), min(y, hi - 1e-9)) for x, y in exp]
        m = derive_region_masks(LandmarkSet(tuple(lip), tuple(exp), (hi, wi)), (hz, wz))
        assert not (m.m_exp * m.m_lip).any()
        assert np.array_equal(m.m_exp + m.m_pose, np.ones((hz, wz)))
        assert np.all(m.m_pose[m.m_lip == 1] == 1)
        o_lip, o_exp, o_pose = region_masks(box_mask(lip, (hi, wi), (hz, wz)), box_mask(exp, (hi, wi), (hz, wz)))
        assert np.array_equal(m.m_lip.astype(bool), np.array(o_lip))
        assert np.array_equal(m.m_exp.astype(bool), np.array(o_exp))
        assert np.array_equal(m.m_pose.astype(bool), np.array(o_pose))
    dt = time.perf_counter() - t0
    record_property("detail", f"{n} landmark sets exact, {dt:.1f}s")
    assert dt < 10


def test_criterion_02_attention_oracle(record_property):
    rng = np.random.default_rng(7)
    t0 = time.perf_counter()
    worst, cases = 0.0, 0
    for n_q in range(1, 5):
        for n_k in range(1, 5):
            for d in range(1, 5):
                for d_c in range(1, 5):
                    for _ in range(4):
                        p = AttentionParams(Tensor(rng.normal(size=(d, d))), Tensor(rng.normal(size=(d, d_c))),
                                            Tensor(rng.normal(size=(d, d_c))))
                        z, c = rng.normal(size=(n_q, d)), rng.normal(size=(n_k, d_c))
                        out = cross_attention(Tensor(z), Tensor(c), p).data
                        ref = dense_attention(z, c, p.w_q.data, p.w_k.data, p.w_v.data)
                        worst = max(worst, float(np.max(np.abs(out - ref))))
                        cases += 1
    dt = time.perf_counter() - t0
    record_property("detail", f"{cases} cases, max abs err {worst:.1e}, {dt:.1f}s")
    assert cases >= 1000 and worst < 1e-10 and dt < 10


def _grad_tiny_denoiser(seed):
    latent = LatentSpec(h_z=4, w_z=4, d_z=2, h_i=8, w_i=8)
    cfg = DenoiserConfig(channels=(3, 4), temb_dim=4, d_f=3, d_a=3, d_raw=1)
    m = Denoiser(cfg, latent, seed=seed)
    rng = np.random.default_rng(seed)
    for name in m.params.names(("hadvs.", "temporal.")):
        m.params[name].data[...] = rng.normal(scale=0.5, size=m.params[name].shape)
    masks = derive_region_masks(LandmarkSet(((3.0, 5.0), (5.0, 6.5)), ((1.0, 1.0), (6.0, 7.0)), (8, 8)), (4, 4))
    z = Tensor(rng.normal(size=(1, 2) + latent.latent_shape))
    c_exp, c_audio = Tensor(rng.normal(size=(1, 3))), Tensor(rng.normal(size=(1, 2, 3)))
    motion = Tensor(rng.normal(size=(1, 2) + latent.latent_shape))
    z_ref = Tensor(rng.normal(size=latent.latent_shape))
    w = Tensor(rng.normal(size=z.shape))
    t = int(rng.integers(0, 100))

    def f(_):
        ref = m.reference(z_ref)
        return tensor_sum(hadamard(m.forward_batch(z, t, c_exp, c_audio, ref, masks, motion), w))

    names = m.params.names()
    picks = [names[i] for i in rng.choice(len(names), 5, replace=False)]
    targets = [m.params[n] for n in picks] + [z, motion]
    return max(check_gradients(f, x, coords=2, rng=rng) for x in targets)


def test_criterion_03_gradient_checks(record_property):
    t0 = time.perf_counter()
    worst = {}
    seeds = range(50)
    for seed in seeds:
        rng = np.random.default_rng(seed)
        lin = LinearParams(Tensor(rng.normal(size=(4, 3))), Tensor(rng.normal(size=4)))
        x = Tensor(rng.normal(size=(5, 3)))
        wl = Tensor(rng.normal(size=(5, 4)))
        errs = [check_gradients(lambda _: tensor_sum(hadamard(linear_forward(lin, x), wl)), t)
                for t in (lin.weight, lin.bias, x)]
        worst["linear"] = max(worst.get("linear", 0.0), *errs)

        cw, cb = Tensor(rng.normal(size=(3, 2, 3, 3))), Tensor(rng.normal(size=3))
        xc = Tensor(rng.normal(size=(2, 2, 6, 6)))
        stride = int(rng.integers(1, 3))
        wc = Tensor(rng.normal(size=conv3x3(xc, cw, cb, stride).shape))
        p1 = Conv1x1Params(Tensor(rng.normal(size=(3, 2))), Tensor(rng.normal(size=3)))
        x1 = Tensor(rng.normal(size=(2, 4, 4)))
        w1 = Tensor(rng.normal(size=(3, 4, 4)))
        errs = [check_gradients(lambda _: tensor_sum(hadamard(conv3x3(xc, cw, cb, stride), wc)), t)
                for t in (cw, cb, xc)]
        errs += [check_gradients(lambda _: tensor_sum(hadamard(conv1x1_forward(p1, x1), w1)), t)
                 for t in (p1.weight, p1.bias, x1)]
        worst["conv"] = max(worst.get("conv", 0.0), *errs)

        ap = AttentionParams.init(4, 3, 2, rng)
        za, ca = Tensor(rng.normal(size=(3, 3))), Tensor(rng.normal(size=(4, 2)))
        wa = Tensor(rng.normal(size=(3, 4)))
        errs = [check_gradients(lambda _: tensor_sum(hadamard(cross_attention(za, ca, ap), wa)), t)
                for t in [za, ca] + ap.parameters()]
        worst["attention"] = max(worst.get("attention", 0.0), *errs)

        fusion = ("direct_addition", "zero_convolution", "self_attention")[seed % 3]
        hc = HadvsConfig.init(3, 2, rng, fusion=fusion, region_weights=tuple(rng.uniform(0, 2, 3)))
        for p in hc.convs.values():
            p.weight.data[...] = rng.normal(size=p.weight.shape)
        lm = LandmarkSet(tuple(map(tuple, rng.uniform(0, 16, (3, 2)))), tuple(map(tuple, rng.uniform(0, 16, (3, 2)))),
                         (16, 16))
        hm = derive_region_masks(lm, (2, 2))
        zh, ch = Tensor(rng.normal(size=(4, 3))), Tensor(rng.normal(size=(3, 2)))
        wh = Tensor(rng.normal(size=(4, 3)))
        errs = [check_gradients(lambda _: tensor_sum(hadamard(hadvs_forward(zh, ch, hm, hc).fused, wh)), t)
                for t in [zh, ch] + hc.parameters()]
        worst["hadvs"] = max(worst.get("hadvs", 0.0), *errs)

        worst["denoiser"] = max(worst.get("denoiser", 0.0), _grad_tiny_denoiser(seed))
    dt = time.perf_counter() - t0
    record_property("detail", ", ".join(f"{k} {v:.1e}" for k, v in worst.items()) + f"; {len(seeds)} seeds, {dt:.0f}s")
    assert all(v < 1e-4 for v in worst.values()) and dt < 120


def test_criterion_04_hadvs_identities(record_property):
    rng = np.random.default_rng(11)
    for _ in range(500):
        d, d_a = int(rng.integers(1, 6)), int(rng.integers(1, 5))
        hz, wz = (int(v) for v in rng.integers(1, 6, 2))
        lm = LandmarkSet(tuple(map(tuple, rng.uniform(0, 31.9, (3, 2)))), tuple(map(tuple, rng.uniform(0, 31.9, (4, 2)))),
                         (32, 32))
        cfg = HadvsConfig.init(d, d_a, rng)
        z = Tensor(rng.normal(size=(2, hz * wz, d)) * rng.uniform(0.1, 100))
        c = Tensor(rng.normal(size=(2, 3, d_a)))
        out = hadvs_forward(z, c, derive_region_masks(lm, (hz, wz)), cfg)
        assert np.array_equal(out.b.data + out.f.data, out.o.data)
        off = HadvsConfig.init(d, d_a, rng, fusion="direct_addition", region_weights=(0.0, 0.0, 0.0))
        assert not hadvs_forward(z, c, derive_region_masks(lm, (hz, wz)), off).fused.data.any()

    latent = LatentSpec(h_z=8, w_z=8, h_i=32, w_i=32)
    m = Denoiser(DenoiserConfig(channels=(8, 16)), latent, seed=3)
    masks = derive_region_masks(LandmarkSet(((12.0, 20.0), (18.0, 24.0)), ((4.0, 4.0), (28.0, 28.0)), (32, 32)),
                                (8, 8))
    cond = ConditionBundle(rng.normal(size=16), rng.normal(size=(5, 32)))
    with no_grad():
        ref = m.reference(Tensor(rng.normal(size=latent.latent_shape)))
        z = Tensor(rng.normal(size=(5,) + latent.latent_shape))
        motion = Tensor(rng.normal(size=(2,) + latent.latent_shape))
        on = m(z, 42, cond, ref, masks, motion, use_hadvs=True).data
        off = m(z, 42, cond, ref, masks, motion, use_hadvs=False).data
    assert np.array_equal(on, off)
    record_property("detail", "b+f==o on 500 draws, zero-conv denoiser bit-identical to ablation, zero weights silent")


def test_criterion_05_diffusion_algebra(record_property):
    sched = NoiseSchedule()
    rng = np.random.default_rng(5)
    worst = 0.0
    for t in range(sched.T):
        z0, eps = rng.normal(size=(3, 4, 4)), rng.normal(size=(3, 4, 4))
        rec = predict_x0(forward_diffuse(z0, t, eps, sched), eps, t, sched)
        worst = max(worst, float(np.linalg.norm(rec - z0) / np.linalg.norm(z0)))
    assert worst < 1e-10

    z0 = rng.normal(size=(2, 4, 4))

    def perfect(z_t, t, passes):
        a, s = np.sqrt(sched.alpha_bars[t]), np.sqrt(1 - sched.alpha_bars[t])
        return [(z_t - a * z0) / s for _ in passes]

    ddim_worst = 0.0
    for start in [None] + list(range(sched.T)):
        zs = None if start is None else forward_diffuse(z0, start, rng.normal(size=z0.shape), sched)
        out = ddim_sample(perfect, z0.shape, sched, GuidanceScales(3.5, 3.5), seed=1, z_start=zs, start_t=start)
        ddim_worst = max(ddim_worst, float(np.max(np.abs(out - z0))))
    assert ddim_worst < 1e-9

    latent = LatentSpec(h_z=8, w_z=8, h_i=32, w_i=32)
    m = Denoiser(DenoiserConfig(channels=(8, 16)), latent, seed=4)
    for name in m.params.names(("hadvs.",)):
        m.params[name].data[...] = rng.normal(scale=0.2, size=m.params[name].shape)
    masks = derive_region_masks(LandmarkSet(((12.0, 20.0),), ((4.0, 4.0), (28.0, 28.0)), (32, 32)), (8, 8))
    cond = ConditionBundle(rng.normal(size=16), rng.normal(size=(3, 32)))
    with no_grad():
        ref = m.reference(Tensor(rng.normal(size=latent.latent_shape)))
    z = rng.normal(size=(3,) + latent.latent_shape)
    fn = model_eps_fn(m, cond, ref, masks)
    guided = cfg_epsilon(fn, z, 30, GuidanceScales(1.0, 1.0))
    with no_grad():
        full = m(Tensor(z), 30, cond, ref, masks).data
    assert np.array_equal(guided, full)
    record_property("detail", f"inversion rel err {worst:.1e}, perfect-model DDIM err {ddim_worst:.1e} over "
                              f"{sched.T + 1} starts, CFG(1,1) bit-equal")


# ---------------------------------------------------------------------------
# 6-8, 10: desk-scale runs
# ---------------------------------------------------------------------------

def test_criterion_06_determinism(world, record_property):
    root = world["root"]
    hallo("train", "--stage", 1, "--config", DESK, "--data", root / "corpus", "--vae", root / "vae",
          "--out", root / "s1b")
    a, b = dir_bytes(root / "s1a"), dir_bytes(root / "s1b")
    assert a.keys() == b.keys() and all(a[k] == b[k] for k in a)
    for run in ("anim_a", "anim_b"):
        hallo("animate", "--config", DESK, "--ckpt", root / "s1a", "--vae", root / "vae", "--reference", root / "ref.ppm",
              "--landmarks", world["corpus"].root / "id00" / "landmarks.txt", "--audio", root / "audio.htns",
              "--frames", 28, "--out", root / run)
    fa, fb = dir_bytes(root / "anim_a"), dir_bytes(root / "anim_b")
    frames = [k for k in fa if k.startswith("frame_")]
    assert len(frames) == 28 and fa == fb
    assert len(json.loads(fa["manifest.json"])["clips"]) == 2
    record_property("detail", f"stage-1 checkpoints ({len(a)} files) and 28 frames in 2 clips bit-identical")


def test_criterion_07_training_signal(world, stage2, record_property):
    r1 = smoothed_ratio(losses(world["root"] / "s1a"))
    s2_dir, _, s2_seconds = stage2["all"]
    r2 = smoothed_ratio(losses(s2_dir))
    record_property("detail", f"stage-1 smoothed ratio {r1:.3f} (< 0.5), stage-2 smoothed ratio {r2:.3f} (< 0.7); "
                              f"{world['stage1_seconds']:.0f}s + {s2_seconds:.0f}s")
    assert r1 < 0.5
    assert r2 < 0.7


def test_criterion_08_hierarchical_sync(world, stage2, record_property):
    corpus = world["corpus"]
    cfg = world["cfg"]
    enc = load_encoders(world["root"] / "vae", cfg)
    data = prepare_data(cfg, corpus, enc)
    clips = [int(c) for c in data.eval_idx[:EVAL_CLIPS]]
    scores = {}
    for name, (ckpt, c, _) in stage2.items():
        scores[name] = np.array(evaluate(c, load_denoiser(ckpt, c), enc, corpus, data, clips)["sync_c"])
    wins = int((scores["all"] >= scores["full"]).sum())
    record_property("detail", f"all-regions >= full-only on {wins}/{len(clips)} held-out clips "
                              f"(mean syncC_proxy {scores['all'].mean():.3f} vs {scores['full'].mean():.3f})")
    assert len(clips) == EVAL_CLIPS and wins >= 7


def test_criterion_10_incremental_inference(world, record_property):
    root, cfg, corpus = world["root"], world["cfg"], world["corpus"]
    enc = load_encoders(root / "vae", cfg)
    model = load_denoiser(root / "s1a", cfg)
    ref = corpus.by_identity(0)[-1].frames[0].astype(np.float64)
    anim = animate(cfg, model, enc, ref, corpus.landmarks[0], htns.load(root / "audio.htns"), 42,
                   out_dir=root / "anim42")
    out = root / "anim42"
    assert len(list(out.glob("frame_*.ppm"))) == 42 and anim.frames.shape[0] == 42
    manifest = json.loads((out / "manifest.json").read_text())
    clips = manifest["clips"]
    assert [(c["start"], c["end"]) for c in clips] == [(0, 14), (14, 28), (28, 42)]
    assert clips[0]["motion_frames"] == 0 and not (out / "motion_000.htns").exists()
    latents = htns.load(out / "latents.htns")
    for c in (1, 2):
        assert clips[c]["motion_sha256"] == clips[c - 1]["final_latents_sha256"]
        a = clips[c]["start"]
        assert np.array_equal(anim.motion_inputs[c], anim.latents[a - 2:a])
        assert np.array_equal(htns.load(out / f"motion_{c:03d}.htns"), latents[a - 2:a])
    record_property("detail", "42 frames in 3 clips; clip motion inputs equal the previous clip's last two latents")


# ---------------------------------------------------------------------------
# 9, 11: metrics and profiling
# ---------------------------------------------------------------------------

def test_criterion_09_frechet(record_property):
    rng = np.random.default_rng(9)
    a = FeatureSet(rng.normal(0.3, 1.5, size=(100_000, 1)))
    b = FeatureSet(rng.normal(-1.0, 0.6, size=(100_000, 1)))
    want = frechet_1d(0.3, 1.5, -1.0, 0.6)
    rel = abs(frechet_distance(a, b) - want) / want
    x = FeatureSet(rng.normal(size=(2000, 16)) @ rng.normal(size=(16, 16)))
    y = FeatureSet(rng.normal(size=(1500, 16)) + 0.5)
    same = frechet_distance(x, x)
    asym = abs(frechet_distance(x, y) - frechet_distance(y, x))
    record_property("detail", f"1-D rel err {rel:.2%}, FID(X,X) {same:.1e}, asymmetry {asym:.1e}")
    assert rel < 0.02 and same < 1e-8 and asym < 1e-10


def test_criterion_11_profiling(record_property):
    cfg = load_config(DESK).replace(schedule=NoiseSchedule(ddim_steps=2))
    rows = profile(cfg, (8, 16, 32), repeats=2)
    for hadvs in (True, False):
        sel = [r for r in rows if r["hadvs"] == hadvs]
        assert [r["resolution"] for r in sel] == ["8x8", "16x16", "32x32"]
        secs, mem = [r["seconds"] for r in sel], [r["peak_bytes"] for r in sel]
        assert secs[0] < secs[1] < secs[2], secs
        assert mem[0] < mem[1] < mem[2], mem
    on = [r for r in rows if r["hadvs"]]
    record_property("detail", ", ".join(f"{r['resolution']} {r['seconds']:.2f}s {r['peak_bytes'] / 2**20:.0f}MiB"
                                        for r in on))
