#!/usr/bin/env python3
"""
Command-line interface for prompt_decoupler.
"""
import argparse
import json
import logging
import sys
from typing import Any, Callable, Dict, List, Optional

from prompt_decoupler.config import RunConfig, load_config
from prompt_decoupler.errors import DecouplerError
from prompt_decoupler.losses import LossWeights
from prompt_decoupler.main import ExperimentRunner
from prompt_decoupler.trainer.ablation import PLAN_BUILDERS
from prompt_decoupler.trainer.prompt_tuner import MASK_SOURCES, MASK_STRATEGIES
from prompt_decoupler.trainer.protocol import SETTINGS


def setup_logging(verbose: bool = False) -> None:
    """Configure logging for the application."""
    log_level = logging.DEBUG if verbose else logging.INFO
    logging.basicConfig(
        level=log_level,
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
        handlers=[logging.StreamHandler()],
    )


def _common_arguments() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="Path to the INI run configuration")
    common.add_argument("--seed", type=int, help="Run with this single seed instead of run.seeds")
    common.add_argument("--out", help="Output directory (overrides run.output_dir)")
    common.add_argument("--checkpoint", help="Backbone checkpoint (default: the pretrain run's)")
    common.add_argument("--mask-source", choices=MASK_SOURCES, help="Grad-CAM masks or ground-truth masks")
    common.add_argument("--mask-strategy", choices=MASK_STRATEGIES, help="Hard mask fill or Gaussian-blurred mask")
    common.add_argument("--weights-preset", choices=sorted(LossWeights.PRESETS), help="Loss coefficient preset")
    common.add_argument("--setting", choices=SETTINGS, help="Evaluation protocol")
    common.add_argument("--shots", type=int, help="Training samples per class")
    common.add_argument("--fraction", type=float, help="Share of the training pool for the fraction setting")
    common.add_argument("--erase-rate", type=float, help="Share of foreground mask cells to erase")
    common.add_argument("--bg-classes", type=int, help="Number of background classes")
    return common


def parse_args(args: Optional[List[str]] = None) -> argparse.Namespace:
    """Parse command line arguments."""
    parser = argparse.ArgumentParser(
        description="Decoupled prompt tuning of a frozen miniature dual encoder on synthetic scenes"
    )
    subparsers = parser.add_subparsers(dest="command", help="Command to execute")
    common = _common_arguments()

    subparsers.add_parser("pretrain", parents=[common], help="Contrastively pretrain and freeze the backbone")
    subparsers.add_parser("train", parents=[common], help="Tune prompts on the frozen backbone")

    eval_parser = subparsers.add_parser("eval", parents=[common], help="Score saved prompts on the test split")
    eval_parser.add_argument("--prompts", help="Prompt checkpoint (default: the train run's)")

    ablate_parser = subparsers.add_parser("ablate", parents=[common], help="Run an ablation plan over all seeds")
    ablate_parser.add_argument(
        "--plan",
        required=True,
        help=f"Built-in plan ({', '.join(sorted(PLAN_BUILDERS))}) or path to a plan .ini file",
    )

    visualize_parser = subparsers.add_parser("visualize", parents=[common], help="Export CAM heatmaps and mask overlays")
    visualize_parser.add_argument("--prompts", help="Prompt checkpoint (default: the train run's, if present)")
    visualize_parser.add_argument("--samples", type=int, default=5, help="Number of test samples (default: 5)")

    parser.add_argument(
        "--verbose",
        "-v",
        action="store_true",
        help="Enable verbose logging"
    )
    return parser.parse_args(args)


def config_overrides(args: argparse.Namespace) -> Dict[str, Any]:
    """Translate command line flags into "section.key" overrides."""
    overrides: Dict[str, Any] = {}
    if args.seed is not None:
        overrides["run.seeds"] = (args.seed,)
    if args.out:
        overrides["run.output_dir"] = args.out
    if args.weights_preset:
        for key, value in LossWeights.PRESETS[args.weights_preset].items():
            overrides[f"loss.{key}"] = value
    flags = {
        "mask_source": "train.mask_source",
        "mask_strategy": "train.mask_strategy",
        "erase_rate": "train.erase_rate",
        "setting": "protocol.setting",
        "shots": "protocol.shots",
        "fraction": "protocol.fraction",
        "bg_classes": "protocol.bg_classes",
    }
    for flag, key in flags.items():
        value = getattr(args, flag)
        if value is not None:
            overrides[key] = value
    return overrides


def _run(args: argparse.Namespace, action: Callable[[ExperimentRunner], int]) -> int:
    logger = logging.getLogger("prompt_decoupler.cli")
    try:
        config: RunConfig = load_config(args.config, config_overrides(args))
        return action(ExperimentRunner(config))
    except (DecouplerError, ValueError) as e:
        logger.error(f"Validation error: {e}")
        return 1
    except Exception as e:
        logger.exception(f"Failed to run {args.command}: {e}")
        return 1


def pretrain_command(args: argparse.Namespace) -> int:
    """Handle the pretrain command."""
    def action(runner: ExperimentRunner) -> int:
        runner.pretrain()
        return 0
    return _run(args, action)


def train_command(args: argparse.Namespace) -> int:
    """Handle the train command."""
    def action(runner: ExperimentRunner) -> int:
        runner.train(args.checkpoint)
        return 0
    return _run(args, action)


def eval_command(args: argparse.Namespace) -> int:
    """Handle the eval command."""
    def action(runner: ExperimentRunner) -> int:
        report = runner.evaluate(args.checkpoint, args.prompts)
        print(json.dumps(report.summary(), indent=2, sort_keys=True))
        return 0
    return _run(args, action)


def ablate_command(args: argparse.Namespace) -> int:
    """Handle the ablate command."""
    def action(runner: ExperimentRunner) -> int:
        runner.ablate(args.plan, args.checkpoint)
        return 0
    return _run(args, action)


def visualize_command(args: argparse.Namespace) -> int:
    """Handle the visualize command."""
    def action(runner: ExperimentRunner) -> int:
        runner.visualize(args.samples, args.checkpoint, args.prompts)
        return 0
    return _run(args, action)


COMMANDS = {
    "pretrain": pretrain_command,
    "train": train_command,
    "eval": eval_command,
    "ablate": ablate_command,
    "visualize": visualize_command,
}


def main(args: Optional[List[str]] = None) -> int:
    """Main entry point for the CLI."""
    parsed_args = parse_args(args)
    setup_logging(parsed_args.verbose)

    if parsed_args.command in COMMANDS:
        return COMMANDS[parsed_args.command](parsed_args)
    else:
        print("No command specified. Use --help for usage information.")
        return 1


if __name__ == "__main__":
    sys.exit(main())
