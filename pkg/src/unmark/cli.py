"""``unmark`` command-line entry point.

Exit codes: 0 success, 2 configuration/usage error, 3 data error,
4 numeric abort (non-finite loss).
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys

from . import __version__
from .errors import ConfigError, UnmarkError

REFERENCE_PARAMS = 32.62e6

DATASET_HELP = """\
dataset layout:
  <out>/manifest.json
  <out>/<split>/<sample_id>/{input.png, bg.png, wm.png, mask.png}   (split: train | test)

manifest.json keys:
  format, version      "unmark-dataset", 1
  profile              name, n_train, n_test, opacity_range, scale_range, grayscale
  seed, image_size     generator seed, square side of every raster
  premultiplied_wm     whether wm.png stores alpha * logo instead of the raw logo
  logos                logo file names per split (disjoint)
  splits.<split>[]     id, host, logo, placement {scale, top_left, opacity, grayscale}, size [h, w]
"""


def _add_synth(sub):
    p = sub.add_parser("synth", help="synthesize a watermarked dataset",
                       formatter_class=argparse.RawDescriptionHelpFormatter, epilog=DATASET_HELP)
    p.add_argument("--profile", required=True, help="logo-l | logo-h | logo-gray | logo-30k")
    p.add_argument("--hosts", required=True, help="directory of host photos (PNG/JPEG)")
    p.add_argument("--logos", required=True, help="directory of logos (PNG with alpha preferred)")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--n-train", type=int, help="override the profile's training-sample count")
    p.add_argument("--n-test", type=int, help="override the profile's test-sample count")
    p.add_argument("--image-size", type=int, default=256, help="square side of generated rasters")
    p.add_argument("--workers", type=int, default=1, help="worker processes (output is identical for any count)")
    p.add_argument("--premultiplied-wm", action="store_true", help="store alpha-multiplied watermark targets")


def _add_stats(sub):
    p = sub.add_parser("stats", help="opacity / area / logo histograms of a dataset",
                       formatter_class=argparse.RawDescriptionHelpFormatter, epilog=DATASET_HELP)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", help="directory for stats.txt and stats.csv (default: print only)")


def _add_train(sub):
    from .trainer import TrainConfig

    p = sub.add_parser("train", help="train SplitNet + RefineNet end to end",
                       description="Every config-file key is also a flag; flags override the file.")
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--summary", action="store_true", help="print parameter counts and exit")
    p.add_argument("--write-config", metavar="FILE", help="write the effective config to FILE and exit")
    for f in dataclasses.fields(TrainConfig):
        flag = "--" + f.name.replace("_", "-")
        p.add_argument(flag, dest=f"cfg_{f.name}", metavar=str(f.type).upper(),
                       help=f"(default: {getattr(TrainConfig, f.name, '')!s})")


def _add_eval(sub):
    p = sub.add_parser("eval", help="PSNR / SSIM / mask IoU of a checkpoint on a dataset split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", help="report directory (default: alongside the checkpoint)")
    p.add_argument("--split", default="test", choices=("train", "test"))
    p.add_argument("--limit", type=int, help="evaluate only the first N samples")


def _add_remove(sub):
    p = sub.add_parser("remove", help="remove the watermark from one image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True, help="directory for final/coarse/mask/wm PNGs")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="unmark", description="Blind visible-watermark removal toolkit.")
    p.add_argument("--version", action="version", version=f"unmark {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", metavar="{synth,stats,train,eval,remove}")
    sub.required = True
    _add_synth(sub)
    _add_stats(sub)
    _add_train(sub)
    _add_eval(sub)
    _add_remove(sub)
    return p


def cmd_synth(args) -> int:
    from .compositor import get_profile, synthesize_dataset

    try:
        profile = get_profile(args.profile).with_counts(args.n_train, args.n_test)
    except KeyError as exc:
        raise ConfigError(exc.args[0]) from None
    man = synthesize_dataset(profile, args.hosts, args.logos, args.seed, args.out,
                             image_size=args.image_size, workers=args.workers,
                             premultiplied_wm=args.premultiplied_wm)
    n = {s: len(v) for s, v in man["splits"].items()}
    print(f"wrote {n['train']} train + {n['test']} test samples to {args.out}")
    return 0


def cmd_stats(args) -> int:
    from .compositor import dataset_stats, write_stats

    st = dataset_stats(args.manifest)
    print(st.to_text(), end="")
    if args.out:
        write_stats(st, args.out)
    return 0


def _train_config(args):
    from .trainer import TrainConfig

    overrides = {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg_") and v is not None}
    if args.config:
        return TrainConfig.load(args.config, **overrides)
    return TrainConfig.from_mapping(overrides)


def cmd_train(args) -> int:
    from .networks import WatermarkRemover, summary
    from .trainer import train

    cfg = _train_config(args)
    if args.write_config:
        cfg.save(args.write_config)
        return 0
    if args.summary:
        s = summary(WatermarkRemover(cfg.arch))
        for k, v in s.items():
            print(f"{k:<24}{v}")
        dev = (s["total"] - REFERENCE_PARAMS) / REFERENCE_PARAMS
        print(f"{'vs 32.62M':<24}{dev:+.2%}")
        return 0
    result = train(cfg)
    print(f"finished at step {result['step']}; checkpoint {result['checkpoint']}")
    if result["val_psnr"] is not None:
        print(f"last validation PSNR {result['val_psnr']:.3f} dB (best {result['best_psnr']:.3f} dB)")
    return 0


def cmd_eval(args) -> int:
    from .metrics import evaluate_dataset

    out = args.out or os.path.join(os.path.dirname(os.path.abspath(args.checkpoint)), "eval")
    s = evaluate_dataset(args.checkpoint, args.manifest, out, split=args.split, limit=args.limit)
    print(s.to_text(), end="")
    print(f"report: {out}")
    return 0


def cmd_remove(args) -> int:
    from .trainer import remove

    paths = remove(args.checkpoint, args.input, args.out)
    for k, v in paths.items():
        print(f"{k}: {v}")
    return 0


COMMANDS = {"synth": cmd_synth, "stats": cmd_stats, "train": cmd_train, "eval": cmd_eval, "remove": cmd_remove}


def dispatch(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                         format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UnmarkError as exc:
        print(f"unmark: error: {exc}", file=sys.stderr)
        return exc.exit_code


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
