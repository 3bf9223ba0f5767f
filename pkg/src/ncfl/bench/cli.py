"""Command-line interface: ``ncfl {train,eval,denoise,ablate,qmap,robustness}``.

Exit status is 0 on success, 1 on usage errors and 2 on runtime failures.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import torch

from ..core import ConfigError, load_config
from ..data import load_clip_dir, load_manifest, save_clip_dir
from ..pipeline import load_model, train_two_stage
from . import experiments as ex
from . import plots

log = logging.getLogger("ncfl")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}\n{self.format_usage()}")


def _clips_from(path: Path, sigma: float):
    """Clean clips plus degraded frames from a manifest, a clip dir or a dir of clip dirs."""
    if path.is_file():
        pairs = load_manifest(path)
        return [p.clean for p in pairs], [p.degraded.frames for p in pairs]
    if any(p.name.startswith("frame_") for p in path.iterdir()):
        clips = [load_clip_dir(path)]
    else:
        clips = [load_clip_dir(d) for d in sorted(path.iterdir()) if d.is_dir()]
    if not clips:
        raise FileNotFoundError(f"{path}: no clips found")
    return clips, None


def cmd_train(args):
    cfg = load_config(args.config)
    if args.iters is not None:
        cfg = cfg.replace(total_iters=args.iters, stage1_iters=min(cfg.stage1_iters, args.iters))
    pairs = load_manifest(args.data) if args.data else ex.desk_training_pairs(cfg.sigma)
    out = Path(args.out)

    def progress(rec):
        if rec["iter"] % max(1, cfg.total_iters // 20) == 0:
            log.info("iter %d loss %.5f ce %.3f psnr %.2f", rec["iter"], rec["loss"], rec["ce_bits"], rec["psnr"])

    result = train_two_stage(cfg, pairs, out_dir=out, callback=progress)
    plots.training_curves(result.records, out / "training.png")
    print(f"checkpoint: {result.checkpoint}")
    return 0


def cmd_eval(args):
    model = load_model(args.ckpt)
    clips, degraded = _clips_from(Path(args.data), args.sigma)
    report = ex.evaluate(model, clips, args.sigma, variant="model", direction=args.direction, degraded=degraded)
    if args.median:
        if degraded is not None:
            raise ValueError("--median needs clean clips with synthesized AWGN")
        report.rows.extend(ex.evaluate_median(clips, args.sigma, args.median).rows)
    print(report.table())
    if args.out:
        out = Path(args.out)
        report.write(out, "eval")
        inputs = [r["input_psnr"] for r in report.rows if r["variant"] == "model"]
        plots.ablation_bars(report.summary(), out / "eval.png", baseline=sum(inputs) / len(inputs))
    return 0


def cmd_denoise(args):
    model = load_model(args.ckpt)
    clip = load_clip_dir(args.inp)
    out = ex.restore_clip(model, clip.frames, args.direction)
    save_clip_dir(out, args.out)
    print(f"wrote {out.shape[0]} frames to {args.out}")
    return 0


def cmd_ablate(args):
    cfg = load_config(args.config)
    variants = [v.strip() for v in args.variants.split(",") if v.strip()]
    if not variants:
        raise UsageError("ablate: --variants is empty")
    seeds = [int(s) for s in args.seeds.split(",")]
    pairs = load_manifest(args.data) if args.data else None
    out = Path(args.out)
    report = ex.ablate(cfg, variants, seeds, train_pairs=pairs, out_dir=out)
    plots.ablation_bars(report.summary(), out / "ablation.png")
    print(report.table())
    return 0


def cmd_qmap(args):
    model = load_model(args.ckpt)
    clip = load_clip_dir(args.inp)
    q = ex.quantization_steps(model, clip.frames, args.frame)
    paths = ex.export_qmaps(q, args.out)
    if args.figure:
        plots.qmap_overview(clip.frames[args.frame], q, Path(args.out) / "overview.pdf")
    print(f"wrote {len(paths) - 1} step maps and {paths[0]}")
    return 0


def cmd_robustness(args):
    model = load_model(args.ckpt)
    clip = load_clip_dir(args.inp)
    report = ex.robustness_report(model, clip, args.sigma, args.seeds)
    out = Path(args.out)
    ex.write_robustness(report, out)
    plots.robustness_bars(report, out / "robustness.png")
    print(json.dumps({k: report[k] for k in ("pairwise_c_hat", "pairwise_c_tilde", "clean_c_hat", "clean_c_tilde")}))
    return 0


def build_parser():
    p = _Parser(prog="ncfl", description="Recurrent video restoration with a learned quantization bottleneck.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    s = sub.add_parser("train", help="two-stage training")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--data", help="dataset manifest (default: synthetic desk corpus)")
    s.add_argument("--iters", type=int, help="override total_iters")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="PSNR/SSIM on clean clips with synthesized AWGN, or a paired manifest")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--sigma", type=float, required=True)
    s.add_argument("--direction", choices=["uni", "bi"])
    s.add_argument("--median", type=int, choices=[3, 5], help="add a median-filter baseline row")
    s.add_argument("--out")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("denoise", help="restore a directory of frames")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--direction", choices=["uni", "bi"])
    s.set_defaults(func=cmd_denoise)

    s = sub.add_parser("ablate", help="train and compare variants")
    s.add_argument("--config", required=True)
    s.add_argument("--variants", required=True, help="comma separated, e.g. full,ncfl_noq,lambda:1/512")
    s.add_argument("--seeds", default="0")
    s.add_argument("--data")
    s.add_argument("--out", default="ablation")
    s.set_defaults(func=cmd_ablate)

    s = sub.add_parser("qmap", help="export quantization-step maps")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--frame", type=int, default=-1)
    s.add_argument("--figure", action="store_true", help="also write overview.pdf")
    s.set_defaults(func=cmd_qmap)

    s = sub.add_parser("robustness", help="feature distances across noise draws")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--sigma", type=float, required=True)
    s.add_argument("--seeds", type=int, required=True)
    s.add_argument("--out", default="robustness")
    s.set_defaults(func=cmd_robustness)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        sys.stderr.write(str(exc))
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    torch.set_num_threads(max(1, torch.get_num_threads()))
    try:
        return args.func(args)
    except UsageError as exc:
        sys.stderr.write(f"{exc}\n")
        return 1
    except (ConfigError, ValueError, FileNotFoundError, OSError, RuntimeError) as exc:
        sys.stderr.write(f"ncfl: {exc}\n")
        return 2


if __name__ == "__main__":
    sys.exit(main())
