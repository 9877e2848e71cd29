"""Command-line experiment runner.

    airfed <scenario> --config <path> [--seed S] [--out DIR]
                      [--snr-db LIST] [--trials N] [--no-compensation]

Exit codes: 0 success, 2 configuration error, 3 protocol abort.
Outputs: <scenario>.csv (plus secondary tables), trace.jsonl, manifest.json.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys

from .config import SCENARIOS, ConfigError, ExperimentConfig, load_config
from .experiments import run_scenario
from .protocol import ProtocolAbort


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="airfed",
        description="Deterministic experiments for OFDM over-the-air gradient aggregation.",
    )
    parser.add_argument("scenario", choices=SCENARIOS)
    parser.add_argument("--config", help="JSON config or a manifest.json from a previous run")
    parser.add_argument("--seed", type=int, help="override the config seed")
    parser.add_argument("--out", help="override the output directory")
    parser.add_argument("--snr-db", help="comma-separated SNR grid override, e.g. 0,10,20")
    parser.add_argument("--trials", type=int, help="override the trial count")
    parser.add_argument("--no-compensation", action="store_true",
                        help="disable phase/timing compensation (channel inversion only)")
    return parser


def resolve_config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig(scenario=args.scenario)
    overrides = {}
    if cfg.scenario != args.scenario:
        overrides["scenario"] = args.scenario
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out is not None:
        overrides["out_dir"] = args.out
    if args.trials is not None:
        overrides["trials"] = args.trials
    if args.snr_db is not None:
        try:
            overrides["snr_db"] = tuple(float(v) for v in args.snr_db.split(","))
        except ValueError as exc:
            raise ConfigError(f"bad --snr-db value {args.snr_db!r}") from exc
    if args.no_compensation:
        overrides["compensation"] = False
    return dataclasses.replace(cfg, **overrides) if overrides else cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    try:
        manifest = run_scenario(cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except ProtocolAbort as exc:
        print(f"protocol abort: {exc}", file=sys.stderr)
        return 3
    print(f"{cfg.scenario}: wrote {len(manifest['outputs']) + 1} files to {cfg.out_dir}")
    for key, val in sorted(manifest["summary"].items()):
        print(f"  {key} = {val}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
