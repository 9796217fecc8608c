#!/usr/bin/env python3
"""
Pyramid adversarial training on a desk-scale Vision Transformer.

Usage:
    python main.py <train|attack|eval|analyze> [--config FILE] [--set key=value ...]
                   [--out DIR] [--seed N] [--checkpoint FILE] [--verbose]

Example:
    python main.py train --config configs/base.yaml --set trainer.regime=pyramid_at
    python main.py eval --config configs/base.yaml --checkpoint runs/default/ckpt_2000.bin
"""

import sys
import argparse
import logging

from config import Config, load_run_config
from exceptions import ConfigurationError
from experiment_runner import COMMANDS, ExperimentRunner
from utils import setup_logging

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2


def build_argparser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=str, default=None, help="YAML run config")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config value, e.g. trainer.regime=pyramid_at (repeatable)")
    common.add_argument("--out", type=str, default=None, help="output directory (overrides output_dir)")
    common.add_argument("--seed", type=int, default=None, help="global seed (overrides seed)")
    common.add_argument("--checkpoint", type=str, default=None,
                        help="model checkpoint; for train, the checkpoint to resume from")
    common.add_argument("--verbose", action="store_true", help="debug logging")

    parser = argparse.ArgumentParser(description="Pyramid adversarial training toolkit")
    commands = parser.add_subparsers(dest="command", required=True)
    helps = {
        "train": "train a model and write checkpoints + metrics.csv",
        "attack": "attack eval images and write per-level perturbations",
        "eval": "clean / corruption / white-box reports",
        "analyze": "Fourier heatmaps and band-limited noise curves",
    }
    for name in COMMANDS:
        commands.add_parser(name, parents=[common], help=helps[name])
    return parser


def main(argv=None):
    """Main entry point; returns the process exit code"""
    args = build_argparser().parse_args(argv)
    logger = setup_logging(logging.DEBUG if args.verbose else logging.INFO)

    try:
        run_config = load_run_config(args.config, args.overrides, seed=args.seed, output_dir=args.out)
    except ConfigurationError as e:
        logger.error(str(e))
        return EXIT_USAGE

    if run_config.dataset.name == "cifar10" and not run_config.dataset.root and not Config.DATA_ROOT:
        logger.info(f"Set {Config.DATA_ROOT_ENV} or dataset.root to choose where CIFAR-10 lives.")

    runner = ExperimentRunner(run_config)
    try:
        result = runner.run(args.command, args.checkpoint)
    except KeyboardInterrupt:
        logger.info("Interrupted by user")
        return EXIT_FAILURE

    print_summary(result)
    if result["success"]:
        return EXIT_OK
    return EXIT_USAGE if result.get("usage_error") else EXIT_FAILURE


def print_summary(result):
    """Print the outcome of a command"""
    print("\n" + "=" * 50)
    print(f"{result['command'].upper()} SUMMARY")
    print("=" * 50)

    if not result["success"]:
        print(f"✗ Failed: {result.get('error', 'Unknown error')}")
        return

    print(f"✓ Output directory: {result['output_dir']}")
    if result.get("checkpoint"):
        print(f"  Checkpoint: {result['checkpoint']}")
    if result.get("files"):
        print(f"  Files: {', '.join(result['files'])}")
    for key, value in result.get("summary", {}).items():
        if isinstance(value, float):
            print(f"  {key}: {value:.4f}")
        else:
            print(f"  {key}: {value}")


if __name__ == "__main__":
    sys.exit(main())
