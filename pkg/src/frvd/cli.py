"""Command-line interface.

Subcommands: synth-data, train-motion, train-i2v, train-frvd, reenact, eval,
ablate.  Exit codes: 0 success, 2 argument error, 3 checkpoint error, 4 data
error.  Every subcommand refuses to overwrite its output artifacts unless
--force is given.
"""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

import numpy as np

from .config import Config, load_config
from .errors import CheckpointError, DataError, InvalidStateError, ShapeMismatchError
from .evalkit import (MetricRow, identity_proxy, metric_l1, metric_psnr, metric_ssim,
                      pose_distance, write_report)
from .synthdata import load_frame_png, make_dataset


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="frvd",
                                description="Desk-scale face reenactment pipeline")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, data=False, ckpt=False):
        sp.add_argument("--config", help="key=value config file")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key")
        sp.add_argument("--force", action="store_true",
                        help="overwrite existing outputs")
        if data:
            sp.add_argument("--data", required=True, help="dataset directory")
        if ckpt:
            sp.add_argument("--ckpt", required=True,
                            help="directory holding stage checkpoints")

    sp = sub.add_parser("synth-data", help="generate the procedural avatar dataset")
    common(sp)
    sp.add_argument("--out", required=True)
    sp.add_argument("--clips", type=int)
    sp.add_argument("--frames", type=int)
    sp.add_argument("--seed", type=int, default=0)

    for name, help_text in (("train-motion", "stage 1: motion extractor"),
                            ("train-i2v", "stage 2: diffusion backbone")):
        sp = sub.add_parser(name, help=help_text)
        common(sp, data=True)
        sp.add_argument("--out", required=True)

    sp = sub.add_parser("train-frvd", help="stage 3: warping feature mapper")
    common(sp, data=True, ckpt=True)
    sp.add_argument("--out", required=True)

    sp = sub.add_parser("reenact", help="generate a reenactment video")
    common(sp, ckpt=True)
    sp.add_argument("--mode", choices=("self", "cross"), required=True)
    sp.add_argument("--source", help="source image (required for cross mode)")
    sp.add_argument("--driving", required=True, help="driving frame directory")
    sp.add_argument("--out", required=True)
    sp.add_argument("--w", type=float)
    sp.add_argument("--steps", type=int)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--no-wfm", action="store_true",
                    help="sample the bare backbone (no warped-feature conditioning)")

    sp = sub.add_parser("eval", help="score generated frames against a reference")
    common(sp, ckpt=True)
    sp.add_argument("--generated", required=True)
    sp.add_argument("--driving", required=True)
    sp.add_argument("--source", help="source image for the identity proxy "
                                     "(default: first driving frame)")
    sp.add_argument("--out", required=True, help="report CSV path")
    sp.add_argument("--clip-id", default="clip")

    sp = sub.add_parser("ablate", help="run one ablation axis on held-out clips")
    common(sp, data=True, ckpt=True)
    sp.add_argument("--out", required=True, help="result CSV path")
    group = sp.add_mutually_exclusive_group(required=True)
    group.add_argument("--sweep", metavar="w=LO..HI",
                       help="guidance sweep, e.g. w=1..6")
    group.add_argument("--wfm", choices=("on", "off"))
    group.add_argument("--rectified", choices=("on", "off"))
    sp.add_argument("--clips-eval", type=int, default=2,
                    help="held-out clips to average over")
    sp.add_argument("--seed", type=int, default=0)
    return p


def _check_outputs(paths, force: bool) -> None:
    clashes = [str(p) for p in paths if Path(p).exists()]
    if clashes and not force:
        raise ValueError("refusing to overwrite existing outputs (use --force): "
                         + ", ".join(clashes))


def _load_cfg(args) -> Config:
    return load_config(args.config, args.set)


def _load_video_dir(path) -> np.ndarray:
    d = Path(path)
    if not d.is_dir():
        raise DataError(f"not a directory: {d}")
    files = sorted(d.glob("*.png"))
    if not files:
        raise DataError(f"no .png frames under {d}")
    return np.stack([load_frame_png(f) for f in files])


def _metric_rows(clip_id, generated, driving, source, extractor) -> list:
    import torch
    rows = []
    with torch.no_grad():
        for i, (g, d) in enumerate(zip(generated, driving)):
            rows.append(MetricRow(
                clip=clip_id, frame=i, l1=metric_l1(g, d), psnr=metric_psnr(g, d),
                ssim=metric_ssim(g, d),
                pose_px=pose_distance([g], [d], extractor),
                id_proxy=identity_proxy([g], source, extractor)))
    return rows


def _cmd_synth_data(args) -> int:
    cfg = _load_cfg(args)
    out = Path(args.out)
    _check_outputs([out / "index.csv"], args.force)
    clips = args.clips if args.clips is not None else cfg["data.clips"]
    frames = args.frames if args.frames is not None else cfg["data.frames"]
    make_dataset(clips, frames, args.seed, out, size=cfg["data.image_size"])
    print(f"wrote {clips} clips x {frames} frames to {out}")
    return 0


def _cmd_train(args, stage: str) -> int:
    from . import pipeline
    cfg = _load_cfg(args)
    out = Path(args.out)
    artifact = {"motion": "motion.ckpt", "i2v": "backbone.ckpt",
                "wfm": "wfm.ckpt"}[stage]
    _check_outputs([out / artifact], args.force)
    if stage == "motion":
        _, log = pipeline.train_motion(args.data, cfg, out_dir=out)
    elif stage == "i2v":
        _, log = pipeline.pretrain_i2v(args.data, cfg, out_dir=out)
    else:
        ckpt = Path(args.ckpt)
        _, log, info = pipeline.train_wfm(args.data, cfg, ckpt / "motion.ckpt",
                                          ckpt / "backbone.ckpt", out_dir=out)
        print(f"frozen hash {info['frozen_hash_before'][:12]} unchanged")
    first = log[0][-1] if stage == "motion" else log[0][1]
    last = log[-1][-1] if stage == "motion" else log[-1][1]
    print(f"{stage}: {len(log)} logged steps, loss {first:.4f} -> {last:.4f}, "
          f"checkpoint {out / artifact}")
    return 0


def _cmd_reenact(args) -> int:
    from . import pipeline
    cfg = _load_cfg(args)
    out = Path(args.out)
    _check_outputs([out / "run_manifest.json", out / "frame_00000.png"], args.force)
    driving = _load_video_dir(args.driving)
    models = pipeline.load_models(cfg, args.ckpt, require_wfm=not args.no_wfm)
    kw = dict(seed=args.seed, use_wfm=not args.no_wfm)
    if args.w is not None:
        kw["w"] = args.w
    if args.steps is not None:
        kw["steps"] = args.steps
    if args.mode == "cross":
        if not args.source:
            raise ValueError("cross mode requires --source")
        source = load_frame_png(args.source)
        frames, manifest = pipeline.cross_reenact(source, driving, models, cfg, **kw)
    else:
        frames, manifest = pipeline.self_reenact(driving, models, cfg, **kw)
    manifest.frame_paths = pipeline.save_video_frames(frames, out)
    manifest.save(out / "run_manifest.json")
    print(f"wrote {len(frames)} frames and run_manifest.json to {out}")
    return 0


def _cmd_eval(args) -> int:
    from . import pipeline
    cfg = _load_cfg(args)
    _check_outputs([args.out], args.force)
    generated = _load_video_dir(args.generated)
    driving = _load_video_dir(args.driving)
    if len(generated) != len(driving):
        raise ShapeMismatchError(f"{len(generated)} generated vs "
                                 f"{len(driving)} driving frames")
    source = load_frame_png(args.source) if args.source else driving[0]
    models = pipeline.load_models(cfg, args.ckpt, require_wfm=False)
    rows = _metric_rows(args.clip_id, generated, driving, source, models.extractor)
    write_report(rows, args.out)
    print(f"wrote {len(rows)} rows (+mean) to {args.out}")
    return 0


def _parse_sweep(text: str) -> list:
    try:
        key, _, span = text.partition("=")
        lo, _, hi = span.partition("..")
        if key.strip() != "w" or not hi:
            raise ValueError
        lo_v, hi_v = int(lo), int(hi)
        if hi_v < lo_v:
            raise ValueError
    except ValueError:
        raise ValueError(f"cannot parse sweep {text!r}; expected w=LO..HI") from None
    return list(range(lo_v, hi_v + 1))


def _cmd_ablate(args) -> int:
    import torch

    from . import pipeline
    from .synthdata import ClipDataset
    cfg = _load_cfg(args)
    _check_outputs([args.out], args.force)
    data = ClipDataset(args.data)
    first_held = pipeline.train_clip_count(len(data), cfg["data.holdout_frac"])
    held = list(range(first_held, len(data))) or [len(data) - 1]
    held = held[:max(1, args.clips_eval)]
    models = pipeline.load_models(cfg, args.ckpt, require_wfm=args.wfm != "off")

    def run(variant_label, **kw):
        l1s, psnrs, ssims = [], [], []
        for ci in held:
            video = data.clip_frames(ci)
            frames, _ = pipeline.self_reenact(torch.from_numpy(video), models, cfg,
                                              seed=args.seed + ci, **kw)
            for g, d in zip(frames, video):
                l1s.append(metric_l1(g, d))
                psnrs.append(metric_psnr(g, d))
                ssims.append(metric_ssim(g, d))
        return (variant_label, float(np.mean(l1s)), float(np.mean(psnrs)),
                float(np.mean(ssims)))

    if args.sweep:
        rows = [run(w, w=float(w)) for w in _parse_sweep(args.sweep)]
        header = ("w", "l1", "psnr", "ssim")
    elif args.wfm:
        rows = [run(args.wfm, use_wfm=args.wfm == "on")]
        header = ("wfm", "l1", "psnr", "ssim")
    else:
        rows = [run(args.rectified, use_r=args.rectified == "on")]
        header = ("rectified", "l1", "psnr", "ssim")

    with open(args.out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([row[0]] + [repr(v) for v in row[1:]])
    print(f"wrote {len(rows)} ablation rows to {args.out}")
    return 0


def dispatch(argv) -> int:
    try:
        args = _build_parser().parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 2
    try:
        if args.command == "synth-data":
            return _cmd_synth_data(args)
        if args.command == "train-motion":
            return _cmd_train(args, "motion")
        if args.command == "train-i2v":
            return _cmd_train(args, "i2v")
        if args.command == "train-frvd":
            return _cmd_train(args, "wfm")
        if args.command == "reenact":
            return _cmd_reenact(args)
        if args.command == "eval":
            return _cmd_eval(args)
        if args.command == "ablate":
            return _cmd_ablate(args)
        raise ValueError(f"unknown command {args.command!r}")
    except (CheckpointError, InvalidStateError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4
    except (ValueError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
