"""Command-line entry point.

Subcommands: dataset | train | capture | attack | evaluate | sweep.
Common flags: --config PATH, --out DIR, --seed U64, --jobs INT; flags
override the corresponding config fields. GRADLEAK_LOG selects the log
level (error, info, debug).

Exit codes: 0 success, 1 validation error (bad config, missing upstream
artifact), 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from .config import ConfigError, load_config
from .container import ContainerError
from .pipeline import ALL_STAGES, MissingArtifactError, run_sweep

log = logging.getLogger("gradleak")

_LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}


def _setup_logging() -> bool:
    level = os.environ.get("GRADLEAK_LOG", "info").lower()
    if level not in _LOG_LEVELS:
        print(f"gradleak: GRADLEAK_LOG must be one of {sorted(_LOG_LEVELS)}, got '{level}'",
              file=sys.stderr)
        return False
    logging.basicConfig(level=_LOG_LEVELS[level], format="%(name)s %(levelname)s: %(message)s")
    return True


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gradleak",
                                     description="Simulate FL gradient exchange and run the "
                                                 "feature-restoration leakage attack.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
        ("dataset", "materialize the train/test datasets"),
        ("train", "train the victim model"),
        ("capture", "record per-anchor gradient packets and ground truth"),
        ("attack", "recover labels/features and invert them to images"),
        ("evaluate", "score attack results against ground truth and emit the report"),
        ("sweep", "run a config grid end to end"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="JSON config file")
        p.add_argument("--out", default=None, help="output directory (overrides config)")
        p.add_argument("--seed", type=int, default=None, help="master seed (overrides config)")
        p.add_argument("--jobs", type=int, default=1, help="parallel worker processes (sweep)")
    return parser


def main(argv=None) -> int:
    if not _setup_logging():
        return 1
    args = build_parser().parse_args(argv)
    try:
        if args.command == "sweep":
            with open(args.config, "r", encoding="utf-8") as f:
                sweep_cfg = json.load(f)
            if "base" not in sweep_cfg or "grid" not in sweep_cfg:
                raise ConfigError("sweep config needs 'base' and 'grid' keys")
            if args.out is not None:
                sweep_cfg["base"]["out"] = args.out
            if args.seed is not None:
                sweep_cfg["base"]["seed"] = args.seed
            run_sweep(sweep_cfg, jobs=args.jobs)
        else:
            cfg = load_config(args.config, {"out": args.out, "seed": args.seed})
            ALL_STAGES[args.command](cfg)
    except (ConfigError, MissingArtifactError, ContainerError, FileNotFoundError,
            json.JSONDecodeError) as exc:
        print(f"gradleak: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failure
        log.error("runtime failure: %s", exc, exc_info=True)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
