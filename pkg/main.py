#!/usr/bin/env python3
"""
aopt - Main Entry Point
Runs acoustic-structure control and shape optimization experiments from INI configurations
"""

import argparse
import sys
import logging
from pathlib import Path

# Add src to path
sys.path.insert(0, str(Path(__file__).parent))

from src.config import Config, RunConfig
from src.exceptions import AoptError
from src.runner import COMMANDS, ExperimentRunner
from src.utils import setup_logging


def parse_args(argv=None):
    parser = argparse.ArgumentParser(prog="aopt", description=__doc__.strip().splitlines()[-1])
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", required=True, type=Path, help="INI experiment configuration")
    parser.add_argument("--jobs", type=int, default=None, help="worker threads (default: AOPT_JOBS)")
    parser.add_argument("--out", type=Path, default=None, help="output directory (default: [output] directory, then AOPT_OUT)")
    parser.add_argument("--resume", action="store_true", help="optimize: restart from the last checkpoint")
    parser.add_argument("--verbose", action="store_true", help="log per-step solver details")
    return parser.parse_args(argv)


def main(argv=None) -> int:
    args = parse_args(argv)

    # Setup logging
    logger = setup_logging(Config.LOGS_DIR, level=logging.DEBUG if args.verbose else logging.INFO)
    logger.info("=" * 60)
    logger.info(f"aopt {args.command} started")
    logger.info("=" * 60)

    try:
        # Validate configuration
        Config.validate()
        config = RunConfig.from_ini(args.config)
        logger.info(f"Configuration {args.config} validated successfully")

        runner = ExperimentRunner(config, out_dir=args.out, jobs=args.jobs)
        summary = runner.run(args.command, resume=args.resume)
        print(summary)

        logger.info("=" * 60)
        logger.info(f"aopt {args.command} completed successfully")
        logger.info("=" * 60)
        return 0

    except AoptError as e:
        logger.error(f"{type(e).__name__}: {e}")
        return e.exit_code

    except Exception as e:
        logger.error(f"Fatal error: {e}", exc_info=True)
        return 1


if __name__ == "__main__":
    sys.exit(main())
