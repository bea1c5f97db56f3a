"""Command-line entry point.

Subcommands::

    nltrans generate --config experiment.yaml
    nltrans learn    --config experiment.yaml [--tt 36] [--model nonlocal]
    nltrans predict  --config experiment.yaml
    nltrans report   --config experiment.yaml
    nltrans sweep    --config experiment.yaml

Exit codes: 0 success, 2 configuration error, 3 numerical failure,
4 missing artifact.
"""

from __future__ import annotations

import argparse
import sys

from .config import load_config
from .errors import ArtifactError, ConfigurationError, NumericalError
from .experiment import (
    run_generate, run_learn, run_predict, run_report, run_sweep,
)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="nltrans",
        description="Coarse-grained nonlocal transport experiments",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, helptext in (
        ("generate", "solve the flow, track particles, write the dataset"),
        ("learn", "fit the configured models on the training window"),
        ("predict", "forward-solve fitted models and tabulate misfits"),
        ("report", "summarize fits and misfits into report.json"),
        ("sweep", "learn+predict over the configured (tt, model) grid"),
    ):
        cmd = sub.add_parser(name, help=helptext)
        cmd.add_argument("--config", required=True,
                         help="path to the experiment YAML config")
        cmd.add_argument("--seed", type=int, default=None,
                         help="override the experiment seed")
        cmd.add_argument("--tt", type=float, default=None,
                         help="override the training-window length")
        cmd.add_argument("--model", default=None,
                         help="restrict learning to a single model")
        cmd.add_argument("--out", default=None,
                         help="override the output directory")
    return parser


def _overrides(args: argparse.Namespace) -> dict:
    overrides = {}
    for key in ("seed", "tt", "model", "out"):
        value = getattr(args, key)
        if value is not None:
            overrides[key] = value
    return overrides


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    overrides = _overrides(args)
    try:
        cfg = load_config(args.config, overrides)
        if args.command == "generate":
            out = run_generate(cfg)
            print(f"generate: dataset written to {out}")
        elif args.command == "learn":
            out = run_learn(cfg)
            print(f"learn: fitted {', '.join(cfg.models)} in {out}")
        elif args.command == "predict":
            out = run_predict(cfg)
            print(f"predict: misfit table written to {out / 'mse_table.csv'}")
        elif args.command == "report":
            out = run_report(cfg)
            print(f"report: summary written to {out / 'report.json'}")
        elif args.command == "sweep":
            out = run_sweep(cfg, args.config, overrides)
            print(f"sweep: job outputs under {out}")
    except ConfigurationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ArtifactError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
