"""
CLI interface for the compositional inference experiments.

Usage:
    python -m compositional_inference list
    python -m compositional_inference validate configs/chain4-inverse-det.json
    python -m compositional_inference run chain4-inverse-det --replicates 1 --out results/chain4
"""

import argparse
import json
import logging
import sys

from compositional_inference import __version__
from compositional_inference.config import RunConfig
from compositional_inference.reports import emit_reports
from compositional_inference.scenarios import list_scenarios, run_scenario, validate_config


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="compositional_inference",
        description="Run compositional state and parameter estimation experiments",
    )
    parser.add_argument(
        '--version',
        action='version',
        version=f'compositional_inference {__version__}',
        help="Show version information"
    )
    parser.add_argument('--verbose', action='store_true', help="Log progress messages")
    parser.add_argument('--debug', action='store_true', help="Log per-step diagnostics")
    commands = parser.add_subparsers(dest='command')

    run = commands.add_parser('run', help="Run one scenario and write its reports")
    run.add_argument('scenario', help="Registered scenario name")
    run.add_argument('--config', help="JSON run configuration; flags override its values")
    run.add_argument('--seed', type=int, help="Master seed (default: 42)")
    run.add_argument('--replicates', type=int, help="Noise realisations (default: 10)")
    run.add_argument('--out', help="Output directory (default: results)")
    run.add_argument('--threads', type=int, help="Worker threads for Jacobi sweeps (default: 1)")

    commands.add_parser('list', help="List registered scenarios")

    validate = commands.add_parser('validate', help="Check a configuration without running it")
    validate.add_argument('config', help="JSON run configuration")
    return parser


def _configure_logging(args):
    level = logging.WARNING
    if args.debug:
        level = logging.DEBUG
    elif args.verbose:
        level = logging.INFO
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")


def _run(args) -> dict:
    if args.config:
        config = RunConfig.from_file(args.config)
        if config.scenario != args.scenario:
            config = config.with_overrides(scenario=args.scenario)
    else:
        config = RunConfig.from_dict({"scenario": args.scenario})
    config = config.with_overrides(seed=args.seed, replicates=args.replicates, out=args.out, threads=args.threads)
    validate_config(config)
    report = run_scenario(config)
    written = emit_reports(report, config.out, {"command": "run"})
    return {
        "scenario": report.scenario,
        "out": config.out,
        "files": [str(path) for path in written],
        "metrics": [metrics.to_dict() for metrics in report.metrics],
    }


def main():
    """
    Main CLI entry point.

    Subcommands:
        run <scenario>: Run a scenario (--config, --seed, --replicates, --out, --threads)
        list: Print the registered scenarios
        validate <config>: Check a configuration file and print the resolved parameters

    Exit codes:
        0: Success
        1: Invalid configuration, unknown scenario or estimation failure
        2: Unexpected error
    """
    parser = build_parser()
    args = parser.parse_args()
    _configure_logging(args)

    if not args.command:
        parser.print_help()
        return

    try:
        if args.command == 'list':
            result = {"scenarios": [{"name": s.name, "description": s.description} for s in list_scenarios()]}
        elif args.command == 'validate':
            config = RunConfig.from_file(args.config)
            result = {"valid": True, "scenario": config.scenario, "params": validate_config(config)}
        else:
            result = _run(args)
        print(json.dumps(result, indent=2))

    except ValueError as e:
        print(f"Error: {e}", file=sys.stderr)
        sys.exit(1)
    except Exception as e:
        print(f"Unexpected error: {e}", file=sys.stderr)
        sys.exit(2)


if __name__ == '__main__':
    main()
