import argparse
import logging
import os
import sys
from pathlib import Path
from typing import List, Optional

from dotenv import load_dotenv

# Import core modules
from src.core.logger import AppLogger, get_application_logger
from src.core.config_manager import ConfigManager, ConfigManagerError, get_application_config
from src.core.simulator import SimulatorError
from src.modules.pipeline import PipelineError, default_run_dir, run_pipeline
from src.modules.smc_abc import BudgetExhaustedError
from src.utils.config_validation import ConfigValidationError, load_run_config, validate_config

EXIT_OK = 0
EXIT_UNEXPECTED = 1
EXIT_CONFIG = 2
EXIT_SIMULATOR = 3
EXIT_BUDGET = 4

VERBS = ("pre-analysis", "infer", "analyse", "validate")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sbi-toolkit",
        description="Simulation-based inference pipeline: pre-analysis, inference and uncertainty analysis.",
    )
    parser.add_argument("--config-dir", default="config", help="Directory holding settings.json (toolkit defaults).")
    parser.add_argument("--log-level", default=None, help="DEBUG, INFO, WARNING or ERROR.")
    sub = parser.add_subparsers(dest="verb", required=True)
    for verb in VERBS:
        p = sub.add_parser(verb)
        p.add_argument("--config", required=True, type=Path, help="Run configuration (JSON).")
        p.add_argument("--seed", type=int, default=None, help="Master seed (overrides the config).")
        p.add_argument("--output-dir", default=None, help="Run directory (overrides the config).")
        p.add_argument("--threads", type=int, default=None, help="Worker threads; 0 = one per physical core.")
        p.add_argument("--model", default=None, help="toy-gaussian, bvcbm, invasion or external.")
        p.add_argument("--algorithm", default=None, help="smc-abc, bsl, rbsl-mean, rbsl-var, npe, tsnpe, nle or rsnl.")
    return parser


def _init_services(config_dir: str, log_level: Optional[str]) -> ConfigManager:
    """Logger first, then configuration; every other module fetches both lazily."""
    level_name = (log_level or os.environ.get("SBI_TOOLKIT_LOG_LEVEL") or "INFO").upper()
    AppLogger(log_dir=os.environ.get("SBI_TOOLKIT_LOG_DIR", "logs"), log_level=getattr(logging, level_name, logging.INFO))
    ConfigManager(config_dir=config_dir)
    config_manager = get_application_config()
    configured_level = config_manager.get_setting("app_settings.log_level", "INFO")
    if log_level is None and "SBI_TOOLKIT_LOG_LEVEL" not in os.environ:
        AppLogger().set_level(getattr(logging, str(configured_level).upper(), logging.INFO))
    return config_manager


def main(argv: Optional[List[str]] = None) -> int:
    load_dotenv()
    args = build_parser().parse_args(argv)
    try:
        config_manager = _init_services(args.config_dir, args.log_level)
    except ConfigManagerError as e:
        print(f"Configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    logger = get_application_logger()
    overrides = {
        "seed": args.seed,
        "output_dir": args.output_dir,
        "threads": args.threads,
        "model": args.model,
        "algorithm": args.algorithm,
    }

    if args.verb == "validate":
        result = validate_config(args.config, overrides)
        if result.ok:
            print(f"{args.config}: configuration is valid.")
            return EXIT_OK
        for message in result.errors:
            print(message, file=sys.stderr)
        return EXIT_CONFIG

    overrides["stage"] = args.verb
    try:
        config = load_run_config(args.config, config_manager.run_defaults(), overrides)
        output_root = os.environ.get("SBI_TOOLKIT_OUTPUT_ROOT") or config_manager.get_setting("app_settings.output_root", "runs")
        run_dir = default_run_dir(config, Path(output_root))
        outcome = run_pipeline(config, args.verb, run_dir)
    except ConfigValidationError as e:
        for message in e.errors:
            print(message, file=sys.stderr)
        return EXIT_CONFIG
    except PipelineError as e:
        logger.error(f"Run input error: {e}")
        return EXIT_CONFIG
    except BudgetExhaustedError as e:
        logger.error(f"Simulation budget exhausted: {e}")
        return EXIT_BUDGET
    except SimulatorError as e:
        logger.error(f"Simulator error: {e}", exc_info=True)
        return EXIT_SIMULATOR
    except Exception as e:
        logger.critical(f"An unhandled error occurred during '{args.verb}': {e}", exc_info=True)
        return EXIT_UNEXPECTED

    if outcome.status == "budget_exhausted":
        logger.warning(f"Stage '{args.verb}' stopped on the simulation budget; results are in {outcome.run_dir}.")
    logger.info(f"Stage '{args.verb}' finished: {outcome.total_simulations} simulations, "
                f"{len(outcome.artifacts)} artefact(s) in {outcome.run_dir / args.verb}.")
    print(outcome.run_dir / args.verb)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
