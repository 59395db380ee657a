"""Command-line entry point: ``snnbayes {gen-data,train,evaluate,slice}``.

Exit codes: 0 success, 2 configuration or input error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from .checkpoint import CheckpointError, load_checkpoint
from .config import ConfigError, RunConfig, load_config
from .core_math import NumericalError
from .data import ParseError, gen_synthetic, save_features
from .train import evaluate_run, slice_run, train_run

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL = 0, 2, 3


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="snnbayes", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="key=value config file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override one config key (repeatable)")

    p = sub.add_parser("gen-data", help="write a synthetic SNNFEAT v1 feature file")
    common(p)
    p.add_argument("--out", required=True, help="output feature file")
    p.add_argument("--no-splits", action="store_true", help="omit split tags")

    p = sub.add_parser("train", help="train an adam or ivon model")
    common(p)

    for name, helptext in (("evaluate", "metrics JSON and calibration CSV"),
                           ("slice", "1D loss slices through a checkpoint")):
        p = sub.add_parser(name, help=helptext)
        common(p)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--out", help="output path (JSON for evaluate, directory for slice)")
    return parser


def _resolve(args, checkpoint=None) -> RunConfig:
    """Config file and overrides, layered on the checkpoint's stored config if any."""
    base = None
    if checkpoint is not None and args.config is None:
        stored = load_checkpoint(checkpoint).meta.get("config")
        if stored:
            base = RunConfig.from_dict(stored)
    return load_config(args.config, args.set, base)


def run(argv=None) -> int:
    args = _parser().parse_args(argv)
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        return _dispatch(args)


def _dispatch(args) -> int:
    try:
        if args.command == "gen-data":
            cfg = _resolve(args)
            d = cfg.data
            ds = gen_synthetic(d.num_classes, d.per_class, d.frames, d.features, d.noise_std, d.seed,
                               d.amplitude, d.offset)
            save_features(ds, args.out, with_splits=not args.no_splits)
            counts = {s: int(ds.indices(s).size) for s in ("train", "val", "test")}
            print(f"wrote {args.out}: N={len(ds)} T={ds.num_frames} F={ds.num_features} "
                  f"C={ds.num_classes} splits={counts}")
        elif args.command == "train":
            manifest = train_run(_resolve(args))
            print(json.dumps(manifest["final_metrics"], sort_keys=True))
        elif args.command == "evaluate":
            report = evaluate_run(args.checkpoint, _resolve(args, args.checkpoint), args.out)
            print(json.dumps(report.to_dict(), sort_keys=True))
        elif args.command == "slice":
            slice_run(args.checkpoint, _resolve(args, args.checkpoint), args.out)
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ConfigError, ParseError, CheckpointError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
