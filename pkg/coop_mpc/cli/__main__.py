"""Command line simulator for sequential distributed MPC.

Run a built-in scenario:

```bash
coop-mpc run consensus-appendix-b --out runs/consensus
```

or

```
python3 -m coop_mpc.cli run path/to/scenario.yaml --steps 100 --parallel
```

Exit status: 0 ok, 2 infeasible local problem, 3 configuration error, 4 IO error.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from typing import List, Optional

from coop_mpc._logger import logger
from coop_mpc.cli.cli import add_args_from_model, parse_model_from_args
from coop_mpc.cli.errors import ExitStatus, format_error
from coop_mpc.cli.runner import build_scenario, describe, load_scenario, run_scenario
from coop_mpc.cli.scenarios import BUILTIN_SCENARIOS
from coop_mpc.cli.settings import RunSettings


def _configure_logging(verbose: bool) -> None:
    if not any(isinstance(h, logging.StreamHandler) for h in logger.handlers):
        handler = logging.StreamHandler(sys.stderr)
        handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
        logger.addHandler(handler)
    logger.setLevel(logging.DEBUG if verbose else logging.WARNING)


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="coop-mpc",
        description="Sequential distributed MPC for self-organised cooperation.",
    )
    commands = parser.add_subparsers(dest="command", required=True)
    run_parser = commands.add_parser("run", help="Run a scenario and write its traces.")
    run_parser.add_argument("scenario", help="Built-in scenario name or path to a YAML file.")
    add_args_from_model(run_parser, RunSettings)
    validate_parser = commands.add_parser("validate", help="Check a scenario without solving.")
    validate_parser.add_argument("path", help="Built-in scenario name or path to a YAML file.")
    commands.add_parser("list-scenarios", help="List the built-in scenarios.")
    return parser


def _run(args: argparse.Namespace) -> int:
    settings = parse_model_from_args(RunSettings, args)
    _configure_logging(settings.verbose)
    config = load_scenario(args.scenario)
    updates = {"parallel": config.parallel or settings.parallel}
    if settings.steps is not None:
        updates["steps"] = settings.steps
    if settings.seed is not None:
        updates["seed"] = settings.seed
    config = config.model_copy(update=updates)
    out_dir = settings.out or os.path.join("runs", config.name)
    status = run_scenario(config, out_dir)
    if status == ExitStatus.OK:
        print(f"wrote {out_dir}")
    return status


def _validate(args: argparse.Namespace) -> int:
    _configure_logging(False)
    config = load_scenario(args.path)
    build = build_scenario(config)
    print(f"{config.name}: ok")
    for line in describe(build):
        print(f"  {line}")
    return ExitStatus.OK


def _list_scenarios() -> int:
    for name, factory in BUILTIN_SCENARIOS.items():
        print(f"{name}\t{factory().description}")
    return ExitStatus.OK


def main(argv: Optional[List[str]] = None) -> int:
    args = _parser().parse_args(argv)
    try:
        if args.command == "run":
            return _run(args)
        if args.command == "validate":
            return _validate(args)
        return _list_scenarios()
    except Exception as exc:
        formatted = format_error(exc)
        if formatted is None:
            raise
        status, report = formatted
        print(f"error ({report['type']}): {report['message']}", file=sys.stderr)
        return status


if __name__ == "__main__":
    sys.exit(main())
