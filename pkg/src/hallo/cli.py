"""Command-line entry point: ``hallo <verb> ...``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import htns
from .maskgen import derive_region_masks, export_masks, load_landmarks
from .metrics import PROXY_NOTE, clip_features, frechet_distance, sync_proxy, video_features

log = logging.getLogger("hallo")


def _config(args):
    from .pipeline import load_config
    cfg = load_config(args.config) if getattr(args, "config", None) else load_config()
    kw = {}
    for name, key in (("seed", "seed"), ("steps", "steps"), ("batch_size", "batch_size"), ("lr", "learning_rate")):
        v = getattr(args, name, None)
        if v is not None:
            kw[key] = v
    return cfg.replace(**kw) if kw else cfg


def _need(path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise SystemExit(f"error: {what} not found: {p}")
    return p


def cmd_synth(args) -> None:
    from .synth import generate_corpus
    out = generate_corpus(args.out, ids=args.ids, clips=args.clips, frames=args.frames, seed=args.seed,
                          d_raw=args.d_raw)
    print(f"wrote synthetic corpus to {out}")


def cmd_train_vae(args) -> None:
    from .pipeline import file_digest, save_encoders, smoothed, train_vae
    from .synth import load_corpus
    cfg = _config(args).replace(stage="vae")
    data = _need(args.data, "corpus")
    enc, losses = train_vae(cfg, load_corpus(data))
    init, final = smoothed(losses, cfg.smooth_window)
    save_encoders(args.out, enc, cfg, {"inputs": {"corpus": file_digest(data / "corpus.json")},
                                       "reconstruction_mse": final})
    print(f"autoencoder: reconstruction mse {init:.4f} -> {final:.4f}; saved to {args.out}")


def _progress(every: int):
    def cb(step, loss):
        if every and (step + 1) % every == 0:
            log.info("step %d loss %.5f", step + 1, loss)
    return cb


def cmd_train(args) -> None:
    from .pipeline import (checkpoint_digest, file_digest, load_checkpoint, load_encoders, prepare_data,
                           save_denoiser, stage2_from, train_stage1, train_stage2)
    from .synth import load_corpus
    cfg = _config(args).replace(stage=f"stage{args.stage}")
    data_dir = _need(args.data, "corpus")
    vae_dir = _need(args.vae, "encoder checkpoint")
    enc = load_encoders(vae_dir, cfg)
    data = prepare_data(cfg, load_corpus(data_dir), enc)
    inputs = {"corpus": file_digest(data_dir / "corpus.json"), "vae": checkpoint_digest(vae_dir)}
    if args.stage == 1:
        res = train_stage1(cfg, data, progress=_progress(args.log_every))
    else:
        if not args.stage1:
            raise SystemExit("error: --stage1 checkpoint is required for stage 2")
        s1 = _need(args.stage1, "stage-1 checkpoint")
        arrays, _ = load_checkpoint(s1, "stage1")
        inputs["stage1"] = checkpoint_digest(s1)
        res = train_stage2(cfg, data, stage2_from(cfg, arrays), progress=_progress(args.log_every))
    save_denoiser(args.out, res, cfg, args.stage, inputs)
    init, final = res.smoothed(cfg.smooth_window)
    print(f"stage {args.stage}: smoothed loss {init:.4f} -> {final:.4f} ({final / init:.3f}x); saved to {args.out}")


def cmd_animate(args) -> None:
    from .encoders import read_ppm
    from .pipeline import animate, load_denoiser, load_encoders
    cfg = _config(args).replace(stage="infer")
    model = load_denoiser(_need(args.ckpt, "checkpoint"), cfg)
    enc = load_encoders(_need(args.vae, "encoder checkpoint"), cfg)
    image = read_ppm(_need(args.reference, "reference image"))
    lm = load_landmarks(_need(args.landmarks, "landmarks"))
    audio = htns.load(_need(args.audio, "audio features"))
    anim = animate(cfg, model, enc, image, lm, audio, args.frames, pad_audio=args.pad_audio, out_dir=args.out,
                   dump_steps=args.dump_steps)
    print(f"wrote {len(anim.frames)} frames in {len(anim.manifest['clips'])} clips to {args.out}")


def _grid_size(text: str) -> tuple[int, int]:
    """``"16x16"`` to ``(16, 16)``."""
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected HxW, got '{text}'") from None
    if h < 1 or w < 1:
        raise argparse.ArgumentTypeError(f"grid extents must be positive, got '{text}'")
    return h, w


def cmd_masks(args) -> None:
    lm = load_landmarks(_need(args.landmarks, "landmarks"))
    masks = derive_region_masks(lm, args.latent)
    export_masks(masks, args.out)
    print(f"wrote masks ({masks.m_lip.sum():.0f} lip, {masks.m_exp.sum():.0f} expression cells) to {args.out}")


def cmd_ablate(args) -> None:
    from .pipeline import (ablation_grid, load_checkpoint, load_denoiser, load_encoders, prepare_data,
                           write_csv)
    from .synth import load_corpus
    cfg = _config(args).replace(stage="infer")
    enc = load_encoders(_need(args.vae, "encoder checkpoint"), cfg)
    corpus = load_corpus(_need(args.data, "corpus"))
    data = prepare_data(cfg, corpus, enc)
    clips = list(data.eval_idx[:args.clips]) if args.clips else None
    rows = []
    for grid in args.grid:
        s1 = model = None
        if grid in ("regions", "fusion"):
            if not args.stage1:
                raise SystemExit(f"error: --stage1 is required for the {grid} grid")
            s1, _ = load_checkpoint(_need(args.stage1, "stage-1 checkpoint"), "stage1")
        else:
            if not args.ckpt:
                raise SystemExit(f"error: --ckpt is required for the {grid} grid")
            model = load_denoiser(_need(args.ckpt, "checkpoint"), cfg)
        rows += ablation_grid(cfg, grid, enc, corpus, data, s1, model, clips, progress=_progress(args.log_every))
    for r in rows:
        r["config_hash"] = cfg.config_hash()
    write_csv(args.out, rows, PROXY_NOTE)
    print(f"wrote {len(rows)} rows to {args.out}")


def cmd_profile(args) -> None:
    from .pipeline import load_checkpoint, profile, write_csv
    cfg = _config(args).replace(stage="infer")
    arrays = load_checkpoint(_need(args.ckpt, "checkpoint"))[0] if args.ckpt else None
    rows = profile(cfg, args.resolutions, arrays, repeats=args.repeats)
    write_csv(args.out, rows)
    for r in rows:
        print(f"{r['resolution']:>6} hadvs={str(r['hadvs']):5} {r['seconds']:.3f}s {r['peak_bytes'] / 2**20:.1f} MiB")


def cmd_metrics(args) -> None:
    import csv

    from .pipeline import read_frames
    gen = read_frames(_need(args.generated, "generated frames"))
    ref = read_frames(_need(args.reference, "reference frames"))
    manifest = Path(args.generated) / "manifest.json"
    chash = json.loads(manifest.read_text()).get("config_hash", "none") if manifest.exists() else "none"
    rows = [("fid_proxy", frechet_distance(clip_features(gen), clip_features(ref)))]
    s = min(len(gen), len(ref))
    win = args.video_window
    if s >= 2 * win:
        n = s // win
        rows.append(("fvd_proxy", frechet_distance(video_features(gen[:n * win].reshape((n, win) + gen.shape[1:])),
                                                   video_features(ref[:n * win].reshape((n, win) + ref.shape[1:])))))
    if args.audio:
        if not args.landmarks:
            raise SystemExit("error: --landmarks is needed for the sync proxy")
        audio = htns.load(_need(args.audio, "audio features"))[:len(gen)]
        lm = load_landmarks(_need(args.landmarks, "landmarks"))
        h, w = gen.shape[-2:]
        masks = derive_region_masks(lm, (h // args.factor, w // args.factor))
        res = sync_proxy(audio, gen[:len(audio)], masks.m_lip)
        rows += [("syncC_proxy", res.sync_c), ("syncD_proxy", res.sync_d), ("sync_offset", res.offset)]
    with open(args.out, "w", newline="") as fh:
        fh.write(f"# {PROXY_NOTE}\n")
        wr = csv.writer(fh)
        wr.writerow(["metric", "value", "config_hash"])
        for name, value in rows:
            wr.writerow([name, repr(float(value)), chash])
    for name, value in rows:
        print(f"{name}: {float(value):.6g}")


def _mask_args(sp) -> None:
    sp.add_argument("--landmarks", required=True)
    sp.add_argument("--latent", type=_grid_size, default=(16, 16), metavar="HxW")
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_masks)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hallo", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="verb", required=True)

    def common(sp, steps=False):
        sp.add_argument("--config", help="INI run-config")
        sp.add_argument("--seed", type=int)
        if steps:
            sp.add_argument("--steps", type=int)
            sp.add_argument("--batch-size", type=int)
            sp.add_argument("--lr", type=float, help="learning rate")
            sp.add_argument("--log-every", type=int, default=50)

    sp = sub.add_parser("synth", help="generate the synthetic talking-face corpus")
    sp.add_argument("--ids", type=int, default=4)
    sp.add_argument("--clips", type=int, default=64)
    sp.add_argument("--frames", type=int, default=16)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--d-raw", type=int, default=8)
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_synth)

    sp = sub.add_parser("train-vae", help="train the autoencoder and face encoder")
    common(sp)
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_train_vae)

    sp = sub.add_parser("train", help="train the denoiser (stage 1 or 2)")
    common(sp, steps=True)
    sp.add_argument("--stage", type=int, choices=(1, 2), required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--vae", required=True)
    sp.add_argument("--stage1", help="stage-1 checkpoint (stage 2 only)")
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_train)

    sp = sub.add_parser("animate", help="generate a video from a reference image and audio features")
    common(sp)
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--vae", required=True)
    sp.add_argument("--reference", required=True, help="P6 PPM image")
    sp.add_argument("--landmarks", required=True)
    sp.add_argument("--audio", required=True, help="HTNS [L, 12 * d_raw]")
    sp.add_argument("--frames", type=int, required=True)
    sp.add_argument("--pad-audio", action="store_true")
    sp.add_argument("--dump-steps", help="write per-step latents here")
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_animate)

    sp = sub.add_parser("masks", help="derive and export region masks")
    _mask_args(sp)

    sp = sub.add_parser("ablate", help="run ablation grids")
    common(sp, steps=True)
    sp.add_argument("--grid", nargs="+", required=True, choices=("regions", "fusion", "weights", "cfg"))
    sp.add_argument("--data", required=True)
    sp.add_argument("--vae", required=True)
    sp.add_argument("--stage1")
    sp.add_argument("--ckpt")
    sp.add_argument("--clips", type=int, default=0, help="limit the number of held-out clips")
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_ablate)

    sp = sub.add_parser("profile", help="time and memory per latent resolution")
    common(sp)
    sp.add_argument("--ckpt")
    sp.add_argument("--resolutions", type=int, nargs="+", default=(8, 16, 32))
    sp.add_argument("--repeats", type=int, default=1)
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_profile)

    sp = sub.add_parser("metrics", help="proxy FID/FVD and sync scores")
    sp.add_argument("--generated", required=True)
    sp.add_argument("--reference", required=True)
    sp.add_argument("--audio")
    sp.add_argument("--landmarks")
    sp.add_argument("--factor", type=int, default=4, help="pixels per latent cell for the lip mask")
    sp.add_argument("--video-window", type=int, default=7)
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_metrics)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        args.fn(args)
    except (ValueError, KeyError, FileNotFoundError, FloatingPointError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    return 0


def maskgen_main(argv=None) -> int:
    """Standalone ``maskgen`` command, same as ``hallo masks``."""
    p = argparse.ArgumentParser(prog="maskgen", description="derive and export region masks")
    _mask_args(p)
    args = p.parse_args(argv)
    try:
        cmd_masks(args)
    except (ValueError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
