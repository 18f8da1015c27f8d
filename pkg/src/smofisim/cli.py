"""Command line entry point: ``smofisim run|compare|partition-report|presets``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import config as config_mod
from .errors import ConfigurationError, DivergenceError, UsageError
from .harness import compare, emit, format_table, partition_report, run_experiment

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED = 0, 2, 3

SEED_STREAMS = ("data", "init", "selection", "batching", "profiles")


def _load(args) -> config_mod.ExperimentConfig:
    if args.config and args.preset:
        raise ConfigurationError("give either --config or --preset", "config")
    if args.preset:
        cfg = config_mod.load_preset(args.preset)
    elif args.config:
        cfg = config_mod.load(args.config)
    else:
        raise ConfigurationError("--config or --preset is required", "config")
    seeds = {k: getattr(args, f"seed_{k}") for k in SEED_STREAMS if getattr(args, f"seed_{k}", None) is not None}
    if seeds:
        cfg = cfg.with_seeds(**seeds)
    rounds = {}
    if getattr(args, "method", None):
        rounds["method"] = args.method
    if getattr(args, "rounds", None) is not None:
        rounds["N"] = args.rounds
    if rounds:
        cfg = cfg.with_rounds(**rounds)
    if getattr(args, "workers", None):
        cfg = cfg.replace(workers=args.workers)
    return cfg


def _add_config_args(p):
    p.add_argument("--config", help="experiment YAML file")
    p.add_argument("--preset", help="bundled config template (see `presets`)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="smofisim", description="Split federated learning simulator")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one experiment")
    _add_config_args(run)
    for k in SEED_STREAMS:
        run.add_argument(f"--seed-{k}", type=int, metavar="N")
    run.add_argument("--method", choices=("smofi", "fedavg", "sflv1", "sflv2"))
    run.add_argument("--rounds", type=int, metavar="N", help="override rounds.N")
    run.add_argument("--workers", type=int, metavar="K", help="threads for per-step client work")
    run.add_argument("--out", default="results", help="output directory")
    run.add_argument("--format", choices=("csv", "jsonl"), default="csv")

    cmp = sub.add_parser("compare", help="tabulate round/time speedups of finished runs")
    cmp.add_argument("--runs", nargs="+", required=True, metavar="SUMMARY_JSON")
    cmp.add_argument("--baseline", type=int, default=0, help="index of the reference run")
    cmp.add_argument("--json", action="store_true", help="print rows as JSON")

    rep = sub.add_parser("partition-report", help="per-client class histograms and J-S imbalance")
    _add_config_args(rep)
    rep.add_argument("--seed-data", type=int, metavar="N")
    rep.add_argument("--seed-profiles", type=int, metavar="N")
    rep.add_argument("--out", default="results")

    sub.add_parser("presets", help="list bundled config templates")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.command == "presets":
            print("\n".join(config_mod.preset_names()))
        elif args.command == "run":
            cfg = _load(args)
            result = run_experiment(cfg)
            paths = emit(result, args.out, args.format)
            s = result.summary
            print(f"{cfg.name} [{s['method']}] best={s['best_accuracy']:.4f} R={s['rounds_to_target']} "
                  f"T={s['time_to_target_s']}")
            for p in paths:
                print(p)
        elif args.command == "compare":
            summaries = [json.loads(Path(p).read_text()) for p in args.runs]
            rows = compare(summaries, args.baseline)
            print(json.dumps(rows, indent=2) if args.json else format_table(rows))
        elif args.command == "partition-report":
            cfg = _load(args)
            for p in partition_report(cfg, args.out):
                print(p)
    except ConfigurationError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
