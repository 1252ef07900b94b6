"""
What every rank of a run does.

The first ``workers`` ranks run the model. When diagnostics are configured
the ranks after them are io servers, each serving a block of ``ios_ratio``
consecutive model ranks.
"""

from __future__ import annotations

import logging
import math
from collections.abc import Mapping, Sequence
from typing import Literal

import attrs

from . import errors, protocols
from .bridge import DEFAULT_CAPACITY, TransportBridge
from .checkpoint import read_checkpoint, restore_state
from .components import build_registry
from .decomp import GlobalGrid, decompose
from .engine import run_model
from .ioserver import (
    DEFAULT_POOL_SIZE,
    DEFAULT_STALENESS_TIMEOUT,
    IoServer,
    IoServerStats,
    parse_io_config,
)
from .options import OptionsDatabase, OptionValue, load_config
from .registry import ComponentDescriptor, enabled_option
from .state import ModelState
from .transport import SubWorld, TransportBase

log = logging.getLogger(__name__)

DEFAULT_IOS_RATIO = 15


def _positive(instance: object, attribute: attrs.Attribute[int], value: int) -> None:
    if value < 1:
        raise errors.ConfigurationError(
            message=f"{attribute.name} must be at least 1, got {value}", key=attribute.name
        )


@attrs.frozen
class RunSettings:
    """
    Everything a rank needs to know to take part in a run
    """

    config_text: str
    workers: int = attrs.field(default=1, validator=_positive)
    io_config_text: str | None = None
    ios_ratio: int = attrs.field(default=DEFAULT_IOS_RATIO, validator=_positive)
    restart: str | None = None
    overrides: Mapping[str, OptionValue] = attrs.field(factory=dict, converter=dict)
    diagnostics_path: str | None = None

    @property
    def io_servers(self) -> int:
        if self.io_config_text is None:
            return 0
        return math.ceil(self.workers / self.ios_ratio)

    @property
    def world_size(self) -> int:
        return self.workers + self.io_servers

    def server_for(self, model_rank: int) -> int:
        return self.workers + model_rank // self.ios_ratio

    def clients_of(self, server_rank: int) -> list[int]:
        index = server_rank - self.workers
        return list(range(index * self.ios_ratio, min((index + 1) * self.ios_ratio, self.workers)))

    def options(self) -> OptionsDatabase:
        options = load_config(self.config_text).merged(self.overrides)
        if self.io_config_text is not None:
            options = options.merged({enabled_option("io_bridge"): True})
        return options


@attrs.frozen
class RankOutcome:
    rank: int
    role: Literal["model", "io"]
    timestep: int = 0
    time: float = 0.0
    loop_seconds: float = 0.0
    submit_seconds: float = 0.0
    io_stats: IoServerStats | None = None


def _model_transport(
    settings: RunSettings, transport: protocols.Transport
) -> protocols.Transport:
    if settings.world_size == settings.workers:
        return transport
    if not isinstance(transport, TransportBase):
        raise errors.ConfigurationError(
            message="io servers need a transport that can be split into sub worlds"
        )
    return SubWorld(transport, settings.workers)


def build_state(settings: RunSettings, transport: protocols.Transport) -> ModelState:
    """
    A fresh or restored state for this model rank
    """
    options = settings.options()
    model_transport = _model_transport(settings, transport)

    if settings.restart is not None:
        checkpoint = read_checkpoint(settings.restart)
        log.info(
            "Restarting from %s at timestep %d",
            settings.restart,
            checkpoint.timestep,
            extra={"rank": transport.rank},
        )
        options = checkpoint.options.merged(options)
        grid = GlobalGrid.from_options(options)
        layout = decompose(grid, settings.workers)[transport.rank]
        return restore_state(checkpoint, layout, transport=model_transport, options=options)

    grid = GlobalGrid.from_options(options)
    layout = decompose(grid, settings.workers)[transport.rank]
    return ModelState.fresh(layout=layout, options=options, transport=model_transport)


def run_model_rank(
    settings: RunSettings,
    transport: protocols.Transport,
    extra: Sequence[ComponentDescriptor] = (),
) -> RankOutcome:
    state = build_state(settings, transport)

    bridge: TransportBridge | None = None
    if settings.io_servers:
        bridge = TransportBridge(
            transport,
            settings.server_for(transport.rank),
            capacity=state.options.get_int("ios_queue_capacity", DEFAULT_CAPACITY),
        )
        state.io_handle = bridge

    registry = build_registry(state.options, extra)
    run_model(state, registry)

    return RankOutcome(
        rank=transport.rank,
        role="model",
        timestep=state.timestep,
        time=state.time,
        loop_seconds=state.loop_seconds,
        submit_seconds=bridge.submit_seconds if bridge is not None else 0.0,
    )


def run_io_rank(settings: RunSettings, transport: protocols.Transport) -> RankOutcome:
    assert settings.io_config_text is not None
    options = settings.options()
    config = parse_io_config(settings.io_config_text)
    log.info(
        "Io server %d serving model ranks %s",
        transport.rank,
        settings.clients_of(transport.rank),
    )
    server = IoServer(
        config,
        transport,
        clients=settings.clients_of(transport.rank),
        servers=list(range(settings.workers, settings.world_size)),
        pool_size=options.get_int("ios_pool_size", DEFAULT_POOL_SIZE),
        staleness_timeout=options.get_real("ios_staleness_timeout", DEFAULT_STALENESS_TIMEOUT),
        output=settings.diagnostics_path,
    )
    stats = server.serve()
    return RankOutcome(rank=transport.rank, role="io", io_stats=stats)


def rank_main(
    settings: RunSettings,
    transport: protocols.Transport,
    extra: Sequence[ComponentDescriptor] = (),
) -> RankOutcome:
    """
    Entry point of every rank of a run
    """
    if transport.size != settings.world_size:
        raise errors.DecompositionError(
            message=f"Run needs {settings.world_size} ranks but the world has {transport.size}"
        )
    if transport.rank < settings.workers:
        return run_model_rank(settings, transport, extra)
    return run_io_rank(settings, transport)
