"""
Weak and strong scaling sweeps.

Weak scaling keeps the points per worker fixed by growing the global grid
with the worker grid, strong scaling keeps the global grid fixed. Each
configuration is timed around the timestep loop only and reported as the
median over repetitions of the slowest rank.
"""

from __future__ import annotations

import csv
import functools
import io
import logging
import pathlib
import statistics
from collections.abc import Iterable, Sequence
from typing import Literal, TextIO

import attrs

from . import errors, protocols
from .decomp import GlobalGrid, decompose, worker_grid
from .fft import check_transform_sizes
from .launch import TransportKind, run_world
from .options import OptionsDatabase, OptionValue, load_config
from .rank import RankOutcome, RunSettings, rank_main

log = logging.getLogger(__name__)

BenchMode = Literal["weak", "strong"]
SolverName = Literal["fft", "krylov"]

CSV_COLUMNS = ("mode", "workers", "gz", "gy", "gx", "solver", "precision", "seconds")
DEFAULT_WORKERS = (1, 2, 4, 8)
DEFAULT_STEPS = 5

CONFIGS = pathlib.Path(__file__).parent / "configs"
DEFAULT_CONFIG = CONFIGS / "dry_boundary_layer.cfg"


def solver_overrides(solver: SolverName) -> dict[str, OptionValue]:
    return {
        "fftsolver_enabled": solver == "fft",
        "iterativesolver_enabled": solver == "krylov",
    }


def weak_grid(base: tuple[int, int, int], workers: int) -> tuple[int, int, int]:
    """
    Per worker block ``base`` replicated over the worker grid
    """
    z, ny, nx = base
    py, px = worker_grid(workers)
    return (z, py * ny, px * nx)


@attrs.frozen
class BenchCase:
    mode: BenchMode
    workers: int
    grid: tuple[int, int, int]
    solver: SolverName
    precision: protocols.Precision

    @property
    def sort_key(self) -> tuple[str, str, str, int]:
        return (self.mode, self.solver, self.precision.value, self.workers)


@attrs.frozen
class BenchResult:
    case: BenchCase
    seconds: float
    repetitions: tuple[float, ...] = ()

    def row(self) -> list[str]:
        gz, gy, gx = self.case.grid
        return [
            self.case.mode,
            str(self.case.workers),
            str(gz),
            str(gy),
            str(gx),
            self.case.solver,
            self.case.precision.value,
            f"{self.seconds:.6f}",
        ]


def plan_cases(
    mode: BenchMode,
    workers: Iterable[int],
    base: tuple[int, int, int],
    solvers: Sequence[SolverName],
    precisions: Sequence[protocols.Precision],
) -> list[BenchCase]:
    cases: list[BenchCase] = []
    for count in workers:
        grid = weak_grid(base, count) if mode == "weak" else base
        for solver in solvers:
            for precision in precisions:
                cases.append(
                    BenchCase(
                        mode=mode, workers=count, grid=grid, solver=solver, precision=precision
                    )
                )
    return cases


def feasibility(case: BenchCase, options: OptionsDatabase) -> str | None:
    """
    The reason this case can't run, if any
    """
    gz, gy, gx = case.grid
    grid = GlobalGrid(
        z_size=gz,
        y_size=gy,
        x_size=gx,
        dz=options.get_real("dz", 1.0),
        dy=options.get_real("dy", 1.0),
        dx=options.get_real("dx", 1.0),
    )
    try:
        decompose(grid, case.workers)
        if case.solver == "fft":
            check_transform_sizes(grid)
    except errors.ConfigurationError as error:
        return error.message
    return None


def case_settings(case: BenchCase, config_text: str, steps: int) -> RunSettings:
    gz, gy, gx = case.grid
    overrides: dict[str, OptionValue] = {
        "z_size": gz,
        "y_size": gy,
        "x_size": gx,
        "nn_timesteps": steps,
        "solver_precision": case.precision.value,
        "checkpointer_enabled": False,
        "io_bridge_enabled": False,
        **solver_overrides(case.solver),
    }
    return RunSettings(config_text=config_text, workers=case.workers, overrides=overrides)


def time_case(
    case: BenchCase,
    config_text: str,
    *,
    steps: int = DEFAULT_STEPS,
    reps: int = 3,
    kind: TransportKind = "socket",
    coord: str | None = None,
) -> BenchResult:
    settings = case_settings(case, config_text, steps)
    timings: list[float] = []
    for _ in range(reps):
        outcomes: list[RankOutcome] = run_world(
            settings.world_size, functools.partial(rank_main, settings), kind=kind, coord=coord
        )
        timings.append(max(outcome.loop_seconds for outcome in outcomes))
    return BenchResult(case=case, seconds=statistics.median(timings), repetitions=tuple(timings))


def cmd_bench(
    mode: BenchMode,
    workers: Iterable[int] = DEFAULT_WORKERS,
    *,
    config_text: str | None = None,
    solvers: Sequence[SolverName] = ("fft", "krylov"),
    precisions: Sequence[protocols.Precision] = tuple(protocols.Precision),
    reps: int = 3,
    steps: int = DEFAULT_STEPS,
    kind: TransportKind = "socket",
    coord: str | None = None,
) -> list[BenchResult]:
    """
    Time every feasible case of a sweep, skipping the rest with a warning.

    In weak mode the grid of the configuration is the block of one worker,
    in strong mode it is the global grid.
    """
    if mode not in ("weak", "strong"):
        raise errors.ConfigurationError(message=f"Unknown bench mode {mode!r}", key="bench")
    if reps < 1:
        raise errors.ConfigurationError(message=f"reps must be at least 1, got {reps}", key="reps")
    if config_text is None:
        config_text = DEFAULT_CONFIG.read_text()

    options = load_config(config_text)
    base = (options.get_int("z_size"), options.get_int("y_size"), options.get_int("x_size"))

    results: list[BenchResult] = []
    for case in plan_cases(mode, workers, base, solvers, precisions):
        if (reason := feasibility(case, options)) is not None:
            log.warning("Skipping %s: %s", case, reason)
            continue
        result = time_case(case, config_text, steps=steps, reps=reps, kind=kind, coord=coord)
        log.info("%s took %.3fs", case, result.seconds)
        results.append(result)

    return sorted(results, key=lambda result: result.case.sort_key)


def write_bench_csv(results: Iterable[BenchResult], out: TextIO) -> None:
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for result in sorted(results, key=lambda result: result.case.sort_key):
        writer.writerow(result.row())


def bench_csv_text(results: Iterable[BenchResult]) -> str:
    out = io.StringIO()
    write_bench_csv(results, out)
    return out.getvalue()
