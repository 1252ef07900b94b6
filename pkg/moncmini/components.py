"""
The built in components.

``MANIFEST`` is the static list of every component the model knows about, in
registration order. Which of them run is decided by ``<name>_enabled``
options.
"""

from __future__ import annotations

import logging
from collections.abc import Callable, Iterable

import attrs

from . import errors, protocols
from .checkpoint import checkpoint_write
from .dycore import (
    init_dry_boundary_layer,
    pressure_source,
    project_velocities,
    timestep_dynamics,
)
from .fft import FFTSolver
from .ioserver import DiagnosticMessage, SlabExtent
from .krylov import IterativeSolver
from .options import OptionsDatabase
from .registry import ComponentDescriptor, Registry, enabled_option
from .state import ModelState
from .stencil import SolverConfig

log = logging.getLogger(__name__)

SOLVER_COMPONENTS = ("fftsolver", "iterativesolver")


def dry_boundary_layer() -> ComponentDescriptor:
    return ComponentDescriptor(name="dry_boundary_layer", init_callback=init_dry_boundary_layer)


def dynamics() -> ComponentDescriptor:
    return ComponentDescriptor(name="dynamics", timestep_callback=timestep_dynamics)


def pressure_source_component() -> ComponentDescriptor:
    return ComponentDescriptor(name="pressure_source", timestep_callback=pressure_source)


def projection() -> ComponentDescriptor:
    return ComponentDescriptor(name="projection", timestep_callback=project_velocities)


@attrs.define
class SolverComponent:
    """
    Solves for ``p`` from ``rhs`` every timestep with a solver built at init
    """

    name: str
    build: Callable[[OptionsDatabase], protocols.PressureSolver]
    solver: protocols.PressureSolver | None = None

    def init(self, state: ModelState) -> None:
        self.solver = self.build(state.options)
        if isinstance(self.solver, FFTSolver):
            self.solver.prepare(state.layout.grid)
        elif isinstance(self.solver, IterativeSolver):
            self.solver.prepare(state.layout)

    def timestep(self, state: ModelState) -> None:
        if self.solver is None:
            self.init(state)
        assert self.solver is not None
        state.fields["p"] = self.solver.solve(state.field("rhs"), state.transport)

    def finalise(self, state: ModelState) -> None:
        if isinstance(self.solver, IterativeSolver) and self.solver.iterations:
            iterations = self.solver.iterations
            log.info(
                "Krylov solver used %d iterations on average over %d solves",
                round(sum(iterations) / len(iterations)),
                len(iterations),
                extra=dict(state.logging_context),
            )

    def descriptor(self) -> ComponentDescriptor:
        return ComponentDescriptor(
            name=self.name,
            init_callback=self.init,
            timestep_callback=self.timestep,
            finalise_callback=self.finalise,
        )


def fftsolver() -> ComponentDescriptor:
    return SolverComponent(name="fftsolver", build=FFTSolver.from_options).descriptor()


def _iterative_solver(options: OptionsDatabase) -> IterativeSolver:
    return IterativeSolver(config=SolverConfig.from_options(options))


def iterativesolver() -> ComponentDescriptor:
    return SolverComponent(name="iterativesolver", build=_iterative_solver).descriptor()


@attrs.define
class IoBridgeComponent:
    """
    Sends the fields the io servers asked for at the cadence they asked for
    """

    cadences: dict[str, int] = attrs.field(factory=dict)
    extent: SlabExtent | None = None

    def _handle(self, state: ModelState) -> protocols.IoBridge:
        if state.io_handle is None:
            raise errors.ConfigurationError(
                message="io_bridge is enabled but this run has no io server",
                key=enabled_option("io_bridge"),
            )
        return state.io_handle

    def init(self, state: ModelState) -> None:
        self.cadences = dict(self._handle(state).handshake(state.layout))
        self.extent = SlabExtent.for_layout(state.layout)

    def timestep(self, state: ModelState) -> None:
        handle = self._handle(state)
        assert self.extent is not None
        for name, cadence in self.cadences.items():
            if state.timestep % cadence:
                continue
            field = state.field(name)
            handle.submit(
                DiagnosticMessage(
                    source=state.transport.rank,
                    timestep=state.timestep,
                    field=name,
                    extent=self.extent,
                    precision=field.precision,
                    values=field.interior.copy(),
                )
            )

    def finalise(self, state: ModelState) -> None:
        self._handle(state).close()

    def descriptor(self) -> ComponentDescriptor:
        return ComponentDescriptor(
            name="io_bridge",
            init_callback=self.init,
            timestep_callback=self.timestep,
            finalise_callback=self.finalise,
        )


def io_bridge() -> ComponentDescriptor:
    return IoBridgeComponent().descriptor()


def _check_termination(state: ModelState) -> None:
    if state.options.has("termination_time"):
        if state.time >= state.options.get_real("termination_time"):
            log.info("Reached the termination time", extra=dict(state.logging_context))
            state.continue_run = False


def termination_check() -> ComponentDescriptor:
    return ComponentDescriptor(name="termination_check", timestep_callback=_check_termination)


def _checkpoint_due(state: ModelState) -> None:
    frequency = state.options.get_int("checkpoint_frequency", 0)
    path = state.options.get_str("checkpoint_path", "")
    if frequency > 0 and path and state.timestep % frequency == 0:
        checkpoint_write(state, path)


def _checkpoint_at_end(state: ModelState) -> None:
    path = state.options.get_str("checkpoint_path", "")
    if not path:
        return
    if state.failure is not None:
        log.warning("Not checkpointing a failed run", extra=dict(state.logging_context))
        return
    checkpoint_write(state, path)


def checkpointer() -> ComponentDescriptor:
    return ComponentDescriptor(
        name="checkpointer",
        timestep_callback=_checkpoint_due,
        finalise_callback=_checkpoint_at_end,
    )


MANIFEST: tuple[Callable[[], ComponentDescriptor], ...] = (
    dry_boundary_layer,
    dynamics,
    pressure_source_component,
    fftsolver,
    iterativesolver,
    projection,
    io_bridge,
    termination_check,
    checkpointer,
)


def build_registry(
    options: OptionsDatabase, extra: Iterable[ComponentDescriptor] = ()
) -> Registry:
    """
    Register every manifest component and any extra ones, then finalise
    """
    enabled_solvers = [
        name for name in SOLVER_COMPONENTS if options.get_bool(enabled_option(name), False)
    ]
    if len(enabled_solvers) > 1:
        raise errors.ConfigurationError(
            message=f"{' and '.join(enabled_solvers)} are mutually exclusive, enable only one",
            key=enabled_option(enabled_solvers[-1]),
        )

    registry = Registry()
    for make in MANIFEST:
        registry.register(make(), options)
    for descriptor in extra:
        registry.register(descriptor, options)
    return registry.finalise(options)
