import argparse
import logging
import sys
from typing import List, Optional

from app.features.experiments.router import add_subcommands
from app.infrastructure.config import settings
from app.infrastructure.errors import (
    ConfigError,
    InsufficientBurnIn,
    LangevinError,
    StepsizeGuardError,
)
from app.infrastructure.logging import configure_logging

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_VERDICT_FAILED = 1
EXIT_CONFIG_ERROR = 2


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="override the suite seed")
    common.add_argument("--threads", type=int, default=None, help="worker pool size")
    common.add_argument("--out-dir", default=None, help=f"default: {settings.OUTPUT_DIR}")
    common.add_argument(
        "--override-stepsize-guard",
        action="store_true",
        help="run stepsizes at or above mu/(2L^2) with a warning instead of refusing",
    )
    common.add_argument(
        "--no-cache", action="store_true", help="recompute even when the run ledger has a result"
    )
    common.add_argument("--log-level", default=settings.LOG_LEVEL)

    parser = argparse.ArgumentParser(
        prog="langevin-lab",
        description=f"{settings.PROJECT_NAME}: convergence experiments for the "
        "unadjusted Langevin algorithm on potentials with discontinuous gradients.",
    )
    add_subcommands(parser, parents=[common])
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    configure_logging(args.log_level)
    try:
        return args.handler(args)
    except (ConfigError, StepsizeGuardError, InsufficientBurnIn) as e:
        logger.error(str(e))
        return EXIT_CONFIG_ERROR
    except (LangevinError, ValueError, OSError) as e:
        logger.error(f"{type(e).__name__}: {e}")
        return EXIT_CONFIG_ERROR


if __name__ == "__main__":
    sys.exit(main())
