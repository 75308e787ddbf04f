"""Command line entry point.

    psrnet run-all --out runs/demo --seed 0
    psrnet synth --out runs/demo --seed 0 && psrnet pretrain-stnet --out runs/demo --seed 0

Exit codes: 0 success, 2 configuration or input error, 3 training or numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import sys

from . import pipeline
from .errors import ConfigError, FormatError, NumericError, TrainError

EXIT_OK, EXIT_CONFIG, EXIT_TRAIN = 0, 2, 3

STAGES = {
    "synth": pipeline.stage_synth,
    "pretrain-stnet": pipeline.stage_pretrain_stnet,
    "pretrain-pgnet": pipeline.stage_pretrain_pgnet,
    "augment": pipeline.stage_augment,
    "finetune": pipeline.stage_finetune,
    "evaluate": pipeline.stage_evaluate,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="psrnet", description="Fine-grained population mapping experiments")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON experiment config")
    common.add_argument("--seed", type=int, help="run a single seed (overrides the config's seed list)")
    common.add_argument("--out", required=True, help="workspace directory")
    common.add_argument("--profile", choices=sorted(pipeline.PROFILES), help="default hyperparameter profile")
    common.add_argument("--scenario", choices=pipeline.SCENARIOS)
    common.add_argument("--n", type=int, help="upscale factor")
    common.add_argument("--variants", help="comma-separated variants, e.g. stnet,psrnet")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in STAGES:
        sub.add_parser(name, parents=[common], help=f"run the {name} stage for one seed")
    sub.add_parser("run-all", parents=[common], help="run every stage for each configured seed")
    sweep = sub.add_parser("sweep", parents=[common], help="run a preset hyperparameter sweep")
    sweep.add_argument("--name", required=True, choices=sorted(pipeline.SWEEPS))
    return parser


def _overrides(args) -> dict:
    out = {}
    if args.seed is not None:
        out["seeds"] = [args.seed]
    if args.scenario:
        out["scenario"] = args.scenario
    if args.n is not None:
        out["n"] = args.n
    if args.variants:
        out["variants"] = [v.strip() for v in args.variants.split(",") if v.strip()]
    return out


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = pipeline.load_config(args.config, args.profile, _overrides(args))
        if args.command == "run-all":
            pipeline.run_experiment(cfg, args.out)
        elif args.command == "sweep":
            pipeline.run_sweep(cfg, args.name, args.out)
        else:
            STAGES[args.command](cfg, cfg.seeds[0], args.out)
    except (ConfigError, FormatError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainError as exc:
        print(f"training failed: {exc}", file=sys.stderr)
        if exc.diagnostics:
            print(f"diagnostics: {exc.diagnostics}", file=sys.stderr)
        return EXIT_TRAIN
    except NumericError as exc:
        print(f"training failed: {exc}", file=sys.stderr)
        return EXIT_TRAIN
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
