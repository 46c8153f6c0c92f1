#!/usr/bin/env python3
"""
Conical tank level control

Simulate linear and nonlinear MPC on the conical tank and compare them.
"""

import argparse
from dataclasses import replace
import logging
import os
import sys
from pathlib import Path

# Add the project root to the path
PROJECT_ROOT = Path(__file__).parent
sys.path.insert(0, str(PROJECT_ROOT))

# When run as a script outside the venv, re-exec with venv python
VENV_PYTHON = PROJECT_ROOT / ".venv" / "bin" / "python"
if __name__ == "__main__" and VENV_PYTHON.exists() and sys.executable != str(VENV_PYTHON):
    os.execv(str(VENV_PYTHON), [str(VENV_PYTHON)] + sys.argv)

from conetank.commands import (
    EXIT_CONFIG, EXIT_ERROR, Colors, cmd_dump_default_config, cmd_run, print_color,
)
from conetank.config import load_config
from conetank.errors import ConfigError


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        description="Conical tank level control - LMPC vs NMPC closed-loop simulation",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  %(prog)s --controller nmpc --config default     Run NMPC on the default scenario
  %(prog)s --controller both --output results     Compare both controllers
  %(prog)s --config my_run.yaml --horizon 15      Custom config, longer horizon
  %(prog)s --dump-default-config > my_run.yaml    Write an editable config
""",
    )
    parser.add_argument(
        "--config", "-c",
        default="default",
        help="Config file path, a name under configs/, or 'default' (default: default)",
    )
    parser.add_argument(
        "--controller",
        choices=["lmpc", "nmpc", "both"],
        default="both",
        help="Controller(s) to simulate (default: both)",
    )
    parser.add_argument("--output", "-o", help="Output directory (overrides the config)")
    parser.add_argument("--horizon", "-N", type=int, help="Prediction horizon for both controllers")
    parser.add_argument("--seed", type=int, help="Seed for the measurement-noise generator")
    parser.add_argument(
        "--dump-default-config",
        action="store_true",
        help="Print the default configuration as YAML and exit",
    )
    parser.add_argument(
        "--verbose", "-v",
        action="store_true",
        help="Show solver debug logging",
    )
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )

    if args.dump_default_config:
        return cmd_dump_default_config()

    try:
        config = load_config(args.config)
        if args.horizon is not None:
            config = config.with_horizon(args.horizon)
    except ConfigError as exc:
        print_color(str(exc), Colors.RED)
        return EXIT_CONFIG
    if args.seed is not None:
        config = replace(config, seed=args.seed)

    try:
        return cmd_run(config, args.controller, Path(args.output) if args.output else None)
    except Exception as exc:
        logging.getLogger(__name__).debug("run failed", exc_info=True)
        print_color(f"Unexpected error: {exc}", Colors.RED)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
