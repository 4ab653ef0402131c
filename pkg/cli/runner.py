import argparse
import logging
import sys
from typing import Dict, List, Optional, Sequence

from pydantic import ValidationError

from field_core.errors import BohmError, ConfigurationError
from .config import ScenarioConfig, resolve_config
from .handlers import HANDLERS, prepare_output

logger = logging.getLogger(__name__)

LOG_LEVELS = ["DEBUG", "INFO", "WARNING", "ERROR"]

# flags whose values may start with '-' (negative window bounds, negative times)
VALUE_FLAGS = {"--window", "--t", "--T", "--eps", "--delta", "--r"}


def _common_flags() -> argparse.ArgumentParser:
    parent = argparse.ArgumentParser(add_help=False)
    parent.add_argument("--scenario", help="preset name (eq4, ground, second-excited, gaussian-packet, ...)")
    parent.add_argument("--config", help="JSON file layered over config/settings.yaml")
    parent.add_argument("--output-dir", dest="output_dir", help="directory for the artifact files")
    parent.add_argument("--window", help="space-time window 'qa:qbxta:tb' (2D: 'xa:xbxya:ybxta:tb')")
    parent.add_argument("--t", type=float, help="target time")
    parent.add_argument("--eps", help="comma-separated node radii")
    parent.add_argument("--delta", help="comma-separated singular collar radii")
    parent.add_argument("--r", type=float, help="confinement radius")
    parent.add_argument("--T", type=float, help="time horizon")
    parent.add_argument("--mc", type=int, help="Monte-Carlo trajectory count")
    parent.add_argument("--seed", type=int, help="random seed")
    parent.add_argument("--count", type=int, help="ensemble size")
    parent.add_argument("--n", type=int, help="grid points per axis")
    parent.add_argument("--dt", type=float, help="split-step time step")
    parent.add_argument("--log-level", dest="log_level", choices=LOG_LEVELS, help="logging level")
    parent.add_argument("--progress", action="store_true", help="show progress bars")
    return parent


def build_parser() -> argparse.ArgumentParser:
    parent = _common_flags()
    parser = argparse.ArgumentParser(prog="bohm", description="Bohmian trajectory simulator and flux auditor")
    commands = parser.add_subparsers(dest="command", required=True)
    commands.add_parser("trajectories", parents=[parent], help="trajectory fan with node-touching paths")
    commands.add_parser("ensemble", parents=[parent], help="equivariance check of a |psi|^2 ensemble")
    commands.add_parser("flux-audit", parents=[parent], help="flux bound on the bad-event probability")
    commands.add_parser("nodes", parents=[parent], help="nodal set inside a space-time window")
    commands.add_parser("quantile-check", parents=[parent], help="ODE endpoints versus quantile transport")
    commands.add_parser("evolve", parents=[parent], help="split-step versus closed-form evolution")
    return parser


def normalize_argv(argv: Sequence[str]) -> List[str]:
    """Join value flags with a following token that argparse would take for an option."""
    argv = list(argv)
    joined, i = [], 0
    while i < len(argv):
        token = argv[i]
        if token in VALUE_FLAGS and i + 1 < len(argv) and argv[i + 1].startswith("-") \
                and not argv[i + 1].startswith("--"):
            joined.append(f"{token}={argv[i + 1]}")
            i += 2
            continue
        joined.append(token)
        i += 1
    return joined


def error_handler(error: Exception) -> int:
    """Log a failed run and map it to its exit code."""
    if isinstance(error, BohmError):
        logger.error(f"{type(error).__name__}: {error}")
        return error.exit_code
    if isinstance(error, ValidationError):
        logger.error(f"Invalid configuration: {error}")
        return ConfigurationError.exit_code
    raise error


def run_scenario(config: ScenarioConfig) -> int:
    """Execute the configured command and write its artifacts.

    Returns:
        Exit status: 0 on success, 1 configuration, 2 input, 3 numerical failure
    """
    try:
        prepare_output(config)
        logger.info(f"Running {config.command} for scenario {config.scenario}")
        result: Dict = HANDLERS[config.command](config)
        logger.info(f"Finished {config.command}; artifacts in {config.output_dir}")
        if result.get("passed") is False:
            logger.warning(f"{config.command} check did not pass")
        return 0
    except (BohmError, ValidationError) as e:
        return error_handler(e)


def run_cli(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(normalize_argv(sys.argv[1:] if argv is None else argv))
    if args.log_level:
        logging.getLogger().setLevel(args.log_level)
    try:
        config = resolve_config(args)
    except (BohmError, ValidationError) as e:
        return error_handler(e)
    return run_scenario(config)
