"""Command-line entry point: ``rkdl {generate,train,evaluate,sweep,gradcheck,preset}``."""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import __version__
from .experiment import (
    EXAMPLES,
    cmd_evaluate,
    cmd_generate,
    cmd_gradcheck,
    cmd_sweep,
    cmd_train,
    config_to_ini,
    preset,
    read_config,
)
from .integrators import IntegrationError
from .trainer import TrainingDiverged
from .dataset import DatasetFormatError

# flag dest -> ExperimentConfig field
OVERRIDES = {
    "noise": "noise",
    "seed": "seed",
    "epochs": "epochs",
    "lr_implicit": "lr_implicit",
    "lr_dynamics": "lr_dynamics",
    "lambda_rk": "lambda_rk",
    "lambda_grad": "lambda_grad",
    "weight_decay": "weight_decay",
    "grid": "grid",
    "steps": "steps",
    "stride": "stride",
    "keep_fraction": "keep_fraction",
    "out": "out",
    "data": "data",
    "points": "points",
    "t_end": "t_end",
    "log_every": "log_every",
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--example", choices=EXAMPLES)
    common.add_argument("--config", help="INI file; flags given on the command line win")
    common.add_argument("--noise", type=float, help="noise level as a fraction of channel std")
    common.add_argument("--seed", type=int)
    common.add_argument("--epochs", type=int)
    common.add_argument("--lr-implicit", type=float)
    common.add_argument("--lr-dynamics", type=float)
    common.add_argument("--lambda-rk", type=float)
    common.add_argument("--lambda-grad", type=float)
    common.add_argument("--weight-decay", type=float)
    common.add_argument("--grid", type=int, help="spatial points (PDE examples)")
    common.add_argument("--steps", type=int, help="time steps (PDE examples)")
    common.add_argument("--points", type=int, help="time samples (ODE examples)")
    common.add_argument("--t-end", type=float, help="final time (ODE examples)")
    common.add_argument("--stride", type=int)
    common.add_argument("--keep-fraction", type=float)
    common.add_argument("--log-every", type=int)
    common.add_argument("--data", help="dataset CSV (default: <out>/data.csv)")
    common.add_argument("--out", help="run directory")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="rkdl", description=__doc__)
    parser.add_argument("--version", action="version", version=f"rkdl {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("generate", parents=[common], help="write clean (or noisy) benchmark data")
    sub.add_parser("train", parents=[common], help="train both networks on a dataset")
    ev = sub.add_parser("evaluate", parents=[common], help="metrics, field grid and heatmaps")
    ev.add_argument("--checkpoint")
    ev.add_argument("--max-denoise-ratio", type=float)
    ev.add_argument("--min-field-cosine", type=float)
    ev.add_argument("--max-field-rel-l2", type=float)
    ev.add_argument("--max-denoise-rel-l2", type=float)
    sw = sub.add_parser("sweep", parents=[common], help="one train+evaluate run per noise level")
    sw.add_argument("--levels", type=float, nargs="+", required=True)
    sw.add_argument("--jobs", type=int, default=1)
    gc = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of the loss")
    gc.add_argument("--fd-step", type=float, default=1e-6)
    gc.add_argument("--tolerance", type=float, default=1e-4)
    sub.add_parser("preset", parents=[common], help="print a preset as an INI config")
    return parser


def resolve_config(args):
    if args.config:
        cfg = read_config(args.config)
        if args.example and args.example != cfg.example:
            cfg = read_config(args.config, preset(args.example))
    else:
        cfg = preset(args.example or "fhn")
    values = {field: getattr(args, dest) for dest, field in OVERRIDES.items()
              if getattr(args, dest, None) is not None}
    for name in ("max_denoise_ratio", "min_field_cosine", "max_field_rel_l2", "max_denoise_rel_l2"):
        if getattr(args, name, None) is not None:
            values[name] = getattr(args, name)
    return replace(cfg, **values)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        if args.command == "preset":
            sys.stdout.write(config_to_ini(cfg))
            return 0
        if args.command == "generate":
            print(cmd_generate(cfg))
            return 0
        if args.command == "train":
            result = cmd_train(cfg)
            last = result.history[-1]
            print(f"epochs {cfg.epochs}  total {last['total']:.6e}  ({result.seconds:.1f} s)")
            return 0
        if args.command == "evaluate":
            report = cmd_evaluate(cfg, args.checkpoint)
            print("\n".join(report.to_lines()[:8]))
            for msg in report.failures:
                print(f"FAIL {msg}", file=sys.stderr)
            return 0 if report.passed else 1
        if args.command == "sweep":
            rows = cmd_sweep(cfg, args.levels, args.jobs)
            print(Path(cfg.out) / "summary.csv")
            return 0 if all(r["status"] == "ok" for r in rows) else 1
        if args.command == "gradcheck":
            err = cmd_gradcheck(cfg, args.fd_step, cfg.seed)
            print(f"max relative error {err:.3e}")
            return 0 if err < args.tolerance else 1
    except (FileNotFoundError, DatasetFormatError, ValueError, IntegrationError,
            TrainingDiverged, FloatingPointError) as exc:
        print(f"rkdl: error: {exc}", file=sys.stderr)
        return 2
    return 2


if __name__ == "__main__":
    sys.exit(main())
