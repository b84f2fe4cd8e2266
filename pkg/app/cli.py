"""Command-line runner: python -m app <subcommand> --config run.json."""

import argparse
import json
import logging
import sys
from typing import List, Optional

from app.core.config import settings
from app.core.errors import ConfigError, InvariantViolation, RobinToolkitError
from app.models.experiment import ExperimentConfig
from app.services.experiment_service import SUBCOMMANDS, load_config, run_experiment

logger = logging.getLogger(__name__)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="python -m app",
        description="Forward and inverse Stokes experiments with a Robin condition on the inner circle",
    )
    parser.add_argument("subcommand", choices=SUBCOMMANDS)
    parser.add_argument("--config", type=str, default=None, help="JSON experiment config (default: built-in defaults)")
    parser.add_argument("--out", type=str, default=None, dest="out_dir", help="Output directory")
    parser.add_argument("--seed", type=int, default=None, help="Overrides inverse.seed")
    parser.add_argument("--threads", type=int, default=None, help="Worker threads for sweeps")
    parser.add_argument("--verbose", action="store_true", help="Debug logging")
    return parser


def configure_logging(verbose: bool = False):
    level = logging.DEBUG if verbose else getattr(logging, settings.LOG_LEVEL.upper(), logging.INFO)
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s", force=True)


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(args.verbose)
    try:
        if args.threads is not None and args.threads < 1:
            raise ConfigError(f"--threads must be >= 1, got {args.threads}")
        config = load_config(args.config) if args.config else ExperimentConfig()
        summary = run_experiment(args.subcommand, config, out_dir=args.out_dir, threads=args.threads, seed=args.seed)
    except InvariantViolation as e:
        logger.error(f"Invariant violated ({e.invariant}): {e}")
        return e.exit_code
    except RobinToolkitError as e:
        logger.error(f"{e.__class__.__name__}: {e}")
        return e.exit_code
    print(json.dumps(summary.model_dump(), indent=2, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
