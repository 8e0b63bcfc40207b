"""Command-line entry point: ``coupled-is run <experiment> [--config file.json] ...``."""

import argparse
import json
import sys

from .experiments import EXPERIMENTS, ConfigError, load_config, parse_config, run


def build_parser():
    parser = argparse.ArgumentParser(prog="coupled-is",
                                     description="Coupled importance sampling experiments.")
    sub = parser.add_subparsers(dest="command", required=True)
    p_run = sub.add_parser("run", help="run one experiment and write CSV + manifest")
    p_run.add_argument("experiment", choices=EXPERIMENTS)
    p_run.add_argument("--config", help="JSON config file (fields of ExperimentConfig)")
    p_run.add_argument("--seed", type=int, help="master seed (overrides the config)")
    p_run.add_argument("--out", help="output directory (overrides the config)")
    p_run.add_argument("--replications", type=int, help="replication count (overrides the config)")
    p_run.add_argument("--full", action="store_true",
                       help="logistic studies at the full dimension 40 instead of the config's")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    overrides = {"seed": args.seed, "out": args.out, "replications": args.replications,
                 "dim": 40 if args.full else None}
    try:
        if args.config:
            cfg = load_config(args.config, overrides)
        else:
            cfg = parse_config(json.dumps({"experiment": args.experiment}), "<defaults>", overrides)
        if cfg.experiment != args.experiment:
            raise ConfigError(f"{args.config}: field 'experiment': config is for "
                              f"{cfg.experiment!r}, command asked for {args.experiment!r}")
        manifest = run(cfg)
    except (ConfigError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    print(json.dumps(manifest["results"], indent=2, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
