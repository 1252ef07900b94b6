"""
The lifecycle engine: every init callback once, the timestep callbacks until
the run is told to stop, then every finalise callback once.
"""

from __future__ import annotations

import logging
import time

from . import errors, protocols
from .registry import Registry
from .state import ModelState

log = logging.getLogger(__name__)


def _sweep(state: ModelState, registry: Registry, stage: protocols.Stage) -> None:
    for entry in registry.order(stage):
        try:
            entry.callback(state)
        except Exception as error:
            raise errors.ComponentFailed(
                component=entry.component, stage=stage.value, error=error
            ) from error


def _finalise_best_effort(state: ModelState, registry: Registry) -> None:
    for entry in registry.order(protocols.Stage.FINALISE):
        try:
            entry.callback(state)
        except Exception:
            log.exception(
                "Finalise callback of '%s' failed during abort",
                entry.component,
                extra=dict(state.logging_context),
            )


def run_model(state: ModelState, registry: Registry) -> ModelState:
    """
    Drive the registered callbacks over the state.

    ``timestep`` and ``time`` are advanced before each timestep sweep so the
    callbacks see the step being computed. A failing callback stops the run,
    the finalise callbacks are given a chance to clean up and the failure is
    raised as ``ComponentFailed``.
    """
    if not registry.finalised:
        raise errors.RegistrationError(message="The registry must be finalised before a run")

    nn_timesteps = state.options.get_int("nn_timesteps", -1)
    context = dict(state.logging_context)
    log.info("Starting run", extra=context)

    try:
        _sweep(state, registry, protocols.Stage.INIT)

        started = time.perf_counter()
        while state.continue_run and (nn_timesteps < 0 or state.timestep < nn_timesteps):
            state.timestep += 1
            state.time += state.dtm
            _sweep(state, registry, protocols.Stage.TIMESTEP)
        state.loop_seconds = time.perf_counter() - started
    except errors.ComponentFailed as failure:
        state.failure = failure
        state.continue_run = False
        log.error(
            "Component '%s' failed during %s: %r",
            failure.component,
            failure.stage,
            failure.error,
            extra=dict(state.logging_context),
        )
        _finalise_best_effort(state, registry)
        raise

    _sweep(state, registry, protocols.Stage.FINALISE)
    log.info(
        "Finished run in %.3fs",
        state.loop_seconds,
        extra=dict(state.logging_context),
    )
    return state
