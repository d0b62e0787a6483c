#!/usr/bin/env python3
"""
USTD - Main entry point for the application.

USTD pre-trains a spatio-temporal graph encoder on unlabeled signals and
uses its latents to condition diffusion denoisers for probabilistic
forecasting and kriging. The workflow is split into batch commands
(synth, pretrain, train, evaluate, bench) implemented in src.ustd_cli.
"""

import sys

from src.ustd_cli import main as run_cli
from src.ustd_logging import logger


def main():
    """
    Main function that serves as the entry point for the application.

    Runs the command given on the command line and returns its exit code:
    0 for success, 2 for configuration errors, 3 for data errors, 4 for
    numeric failures and 1 for anything else.

    Returns:
        int: Exit code
    """
    logger.info("Starting USTD...")
    return run_cli(sys.argv[1:])


if __name__ == "__main__":
    sys.exit(main())
