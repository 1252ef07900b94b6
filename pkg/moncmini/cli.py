"""
The ``moncmini`` command.

Without ``--bench`` it runs the model described by ``--config`` on
``--workers`` model ranks, plus io servers when ``--io-config`` is given.
With ``--bench weak|strong`` it times a scaling sweep and writes CSV.

The exit status is 0 on success and otherwise the ``exit_code`` of the error
that stopped the run.
"""

from __future__ import annotations

import argparse
import functools
import logging
import os
import pathlib
import sys
from collections.abc import Sequence
from typing import cast

from . import bench, errors, protocols
from .launch import TransportKind, run_world
from .options import OptionValue
from .rank import DEFAULT_IOS_RATIO, RunSettings, rank_main
from .version import VERSION

log = logging.getLogger(__name__)


def _worker_counts(text: str) -> list[int]:
    try:
        counts = [int(part) for part in text.split(",") if part.strip()]
    except ValueError as error:
        raise argparse.ArgumentTypeError(
            f"expected comma separated worker counts, got {text!r}"
        ) from error
    if not counts or any(count < 1 for count in counts):
        raise argparse.ArgumentTypeError(f"worker counts must be at least 1, got {text!r}")
    return counts


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="moncmini", description="Run or benchmark the desk scale atmospheric model"
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {VERSION}")
    parser.add_argument(
        "--config",
        type=pathlib.Path,
        help="key=value model configuration (default: the dry boundary layer case)",
    )
    parser.add_argument(
        "--io-config", type=pathlib.Path, help="XML io server configuration, enables io servers"
    )
    parser.add_argument(
        "--workers",
        type=_worker_counts,
        help="model ranks for a run, or a comma separated list for a sweep",
    )
    parser.add_argument(
        "--ios-ratio",
        type=int,
        default=DEFAULT_IOS_RATIO,
        help="model ranks served by each io server",
    )
    parser.add_argument("--solver", choices=["fft", "krylov"], help="pressure solver to enable")
    parser.add_argument(
        "--precision", choices=[precision.value for precision in protocols.Precision]
    )
    parser.add_argument("--restart", type=pathlib.Path, help="continue from this checkpoint")
    parser.add_argument("--checkpoint", type=pathlib.Path, help="write a checkpoint here")
    parser.add_argument("--steps", type=int, help="number of timesteps to run")
    parser.add_argument("--bench", choices=["weak", "strong"], help="run a scaling sweep")
    parser.add_argument("--reps", type=int, default=3, help="repetitions per bench case")
    parser.add_argument("--out", type=pathlib.Path, help="bench CSV (default: stdout)")
    parser.add_argument(
        "--transport",
        choices=["inprocess", "socket"],
        help="how ranks talk (default: socket for --bench, inprocess otherwise)",
    )
    parser.add_argument(
        "--coord",
        default=os.environ.get("MONC_COORD"),
        help="HOST:PORT of the socket rendezvous (default: $MONC_COORD)",
    )
    parser.add_argument(
        "--log-level",
        choices=["CRITICAL", "ERROR", "WARNING", "INFO", "DEBUG"],
        default="INFO",
    )
    return parser


def transport_for(args: argparse.Namespace) -> TransportKind:
    """
    Sweeps time separate processes, plain runs share one
    """
    if args.transport is not None:
        return cast(TransportKind, args.transport)
    return "socket" if args.bench is not None else "inprocess"


def _read(path: pathlib.Path, key: str) -> str:
    try:
        return path.read_text()
    except OSError as error:
        raise errors.ConfigurationError(
            message=f"Could not read {path}: {error}", key=key
        ) from error


def overrides_from(args: argparse.Namespace) -> dict[str, OptionValue]:
    overrides: dict[str, OptionValue] = {}
    if args.solver is not None:
        overrides.update(bench.solver_overrides(args.solver))
    if args.precision is not None:
        overrides["solver_precision"] = args.precision
    if args.checkpoint is not None:
        overrides["checkpoint_path"] = str(args.checkpoint)
    if args.steps is not None:
        overrides["nn_timesteps"] = args.steps
    return overrides


def cmd_run(args: argparse.Namespace) -> int:
    workers = args.workers or [1]
    if len(workers) != 1:
        raise errors.ConfigurationError(
            message="A run takes a single worker count", key="workers"
        )

    # A restart keeps the options stored in its checkpoint unless a config is given
    if args.config is not None:
        config_text = _read(args.config, "config")
    elif args.restart is not None:
        config_text = ""
    else:
        config_text = _read(bench.DEFAULT_CONFIG, "config")

    settings = RunSettings(
        config_text=config_text,
        workers=workers[0],
        io_config_text=None if args.io_config is None else _read(args.io_config, "io-config"),
        ios_ratio=args.ios_ratio,
        restart=None if args.restart is None else str(args.restart),
        overrides=overrides_from(args),
    )

    outcomes = run_world(
        settings.world_size,
        functools.partial(rank_main, settings),
        kind=transport_for(args),
        coord=args.coord,
    )
    model = [outcome for outcome in outcomes if outcome.role == "model"]
    log.info(
        "Run finished at timestep %d (model time %s) after %.3fs in the timestep loop",
        model[0].timestep,
        model[0].time,
        max(outcome.loop_seconds for outcome in model),
    )
    return 0


def cmd_bench(args: argparse.Namespace) -> int:
    config = args.config if args.config is not None else bench.DEFAULT_CONFIG
    results = bench.cmd_bench(
        args.bench,
        args.workers or bench.DEFAULT_WORKERS,
        config_text=_read(config, "config"),
        solvers=("fft", "krylov") if args.solver is None else (args.solver,),
        precisions=(
            tuple(protocols.Precision)
            if args.precision is None
            else (protocols.Precision(args.precision),)
        ),
        reps=args.reps,
        steps=bench.DEFAULT_STEPS if args.steps is None else args.steps,
        kind=transport_for(args),
        coord=args.coord,
    )

    if args.out is None:
        bench.write_bench_csv(results, sys.stdout)
        return 0

    try:
        with args.out.open("w", newline="") as handle:
            bench.write_bench_csv(results, handle)
    except OSError as error:
        raise errors.StorageError(
            message=f"Could not write bench results: {error}", path=str(args.out)
        ) from error
    return 0


def describe(error: BaseException) -> str:
    if isinstance(error, errors.ComponentFailed):
        return f"{error.component} failed during {error.stage}: {describe(error.error)}"
    message = getattr(error, "message", None)
    return message if isinstance(message, str) else repr(error)


def main(argv: Sequence[str] | None = None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(
        level=args.log_level,
        format="%(asctime)s %(levelname)-8s %(name)s: %(message)s",
    )

    try:
        if args.bench is not None:
            return cmd_bench(args)
        return cmd_run(args)
    except errors.MoncError as error:
        log.error("moncmini failed: %s", describe(error))
        return error.exit_code
