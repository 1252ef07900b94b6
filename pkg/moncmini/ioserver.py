"""
Diagnostics servers.

Model ranks fire their raw prognostic slabs at a server and carry on. The
server hands every slab to a thread pool which reduces it to per level
partial results, combines the partials of all its model ranks once a timestep
is complete and, when there is more than one server, forwards the combined
partial to the lead server. The lead server combines the partials of every
server in server order and appends the results to a CSV file.

Everything travels over the transport on the ``DIAG`` tags: a JSON header
encoded as bytes, followed for slabs and partials by one array on
``DIAG_SLAB``.
"""

from __future__ import annotations

import json
import logging
import pathlib
import threading
import time
import xml.etree.ElementTree as ET
from collections.abc import Callable, Iterable, Mapping, Sequence
from concurrent.futures import Future, ThreadPoolExecutor
from typing import Any, Self

import attrs
import numpy as np

from . import errors, protocols
from .decomp import PencilLayout

log = logging.getLogger(__name__)

DEFAULT_OUTPUT = "diagnostics.csv"
DEFAULT_POOL_SIZE = 4
DEFAULT_STALENESS_TIMEOUT = 60.0
CSV_HEADER = "output,timestep,level,value\n"

HORIZONTAL_REDUCTION = "horizontal_reduction"


## CONFIGURATION


@attrs.frozen
class FieldRequest:
    name: str
    cadence: int = 1

    def due(self, timestep: int) -> bool:
        return timestep % self.cadence == 0


@attrs.frozen
class DiagnosticAction:
    field: str
    operator: protocols.DiagnosticOperator
    output: str
    kind: str = HORIZONTAL_REDUCTION


@attrs.frozen
class IoServerConfig:
    fields: tuple[FieldRequest, ...] = ()
    actions: tuple[DiagnosticAction, ...] = ()
    output: str = DEFAULT_OUTPUT

    def __attrs_post_init__(self) -> None:
        requested = {request.name for request in self.fields}
        for request in self.fields:
            if request.cadence < 1:
                raise errors.ConfigurationError(
                    message=f"Field '{request.name}' has cadence {request.cadence}, it must be"
                    " at least 1",
                    key=request.name,
                )
        outputs: set[str] = set()
        for action in self.actions:
            if action.field not in requested:
                raise errors.ConfigurationError(
                    message=f"Action '{action.output}' uses field '{action.field}' which is"
                    " not requested",
                    key=action.field,
                )
            if action.output in outputs:
                raise errors.ConfigurationError(
                    message=f"More than one action writes '{action.output}'", key=action.output
                )
            outputs.add(action.output)

    @property
    def cadences(self) -> dict[str, int]:
        return {request.name: request.cadence for request in self.fields}

    def actions_for(self, field: str) -> list[DiagnosticAction]:
        return [action for action in self.actions if action.field == field]

    def due_fields(self, timestep: int) -> list[str]:
        return [request.name for request in self.fields if request.due(timestep)]


def _attribute(element: ET.Element, name: str, *, default: str | None = None) -> str:
    value = element.get(name, default)
    if value is None:
        raise errors.ConfigurationError(
            message=f"<{element.tag}> needs a '{name}' attribute", key=name
        )
    return value


def parse_io_config(xml: str) -> IoServerConfig:
    """
    Read the ``<io-config>`` document describing what the servers compute
    """
    try:
        root = ET.fromstring(xml)
    except ET.ParseError as error:
        raise errors.ConfigurationError(
            message=f"io server configuration is not valid XML: {error}",
            line=error.position[0],
        ) from error

    if root.tag != "io-config":
        raise errors.ConfigurationError(message=f"Expected <io-config>, found <{root.tag}>")

    fields: list[FieldRequest] = []
    actions: list[DiagnosticAction] = []
    output = DEFAULT_OUTPUT

    for section in root:
        if section.tag == "fields":
            for element in section:
                if element.tag != "field":
                    raise errors.ConfigurationError(message=f"Unknown element <{element.tag}>")
                cadence = _attribute(element, "cadence", default="1")
                if not cadence.isdigit():
                    raise errors.ConfigurationError(
                        message=f"cadence must be a positive integer, got {cadence!r}",
                        key="cadence",
                    )
                name = _attribute(element, "name")
                fields.append(FieldRequest(name=name, cadence=int(cadence)))
        elif section.tag == "actions":
            for element in section:
                if element.tag != "action":
                    raise errors.ConfigurationError(message=f"Unknown element <{element.tag}>")
                actions.append(_parse_action(element))
        elif section.tag == "output":
            output = _attribute(section, "path")
        else:
            raise errors.ConfigurationError(message=f"Unknown element <{section.tag}>")

    return IoServerConfig(fields=tuple(fields), actions=tuple(actions), output=output)


def _parse_action(element: ET.Element) -> DiagnosticAction:
    kind = _attribute(element, "kind", default=HORIZONTAL_REDUCTION)
    if kind != HORIZONTAL_REDUCTION:
        raise errors.ConfigurationError(message=f"Unknown action kind '{kind}'", key="kind")

    field = _attribute(element, "field")
    name = _attribute(element, "operator")
    try:
        operator = protocols.DiagnosticOperator(name)
    except ValueError as error:
        raise errors.ConfigurationError(
            message=f"unknown operator '{name}'", key="operator"
        ) from error

    output = _attribute(element, "output", default=f"{field}_{operator.value}")
    return DiagnosticAction(field=field, operator=operator, output=output, kind=kind)


## MESSAGES


def encode_header(header: Mapping[str, Any]) -> protocols.Array:
    return np.frombuffer(json.dumps(header, sort_keys=True).encode("utf-8"), dtype=np.uint8)


def decode_header(payload: protocols.Array) -> dict[str, Any]:
    try:
        decoded = json.loads(np.asarray(payload, dtype=np.uint8).tobytes().decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as error:
        raise errors.ProtocolError(message=f"Undecodable diagnostics header: {error}") from error
    if not isinstance(decoded, dict) or "kind" not in decoded:
        raise errors.ProtocolError(message="Diagnostics header has no kind")
    return decoded


@attrs.frozen
class SlabExtent:
    """
    Where a model rank's Z pencil sits in the global grid
    """

    z_size: int
    y_start: int
    y_size: int
    x_start: int
    x_size: int

    @classmethod
    def for_layout(cls, layout: PencilLayout) -> Self:
        (y0, ny), (x0, nx) = layout.y_extent, layout.x_extent
        return cls(z_size=layout.grid.z_size, y_start=y0, y_size=ny, x_start=x0, x_size=nx)

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.z_size, self.y_size, self.x_size)

    def as_list(self) -> list[int]:
        return [self.z_size, self.y_start, self.y_size, self.x_start, self.x_size]

    @classmethod
    def from_list(cls, values: Sequence[int]) -> Self:
        z, y0, ny, x0, nx = (int(value) for value in values)
        return cls(z_size=z, y_start=y0, y_size=ny, x_start=x0, x_size=nx)


@attrs.frozen
class DiagnosticMessage:
    source: int
    timestep: int
    field: str
    extent: SlabExtent
    precision: protocols.Precision
    values: protocols.Array = attrs.field(eq=False, repr=False)

    def __attrs_post_init__(self) -> None:
        if self.values.shape != self.extent.shape:
            raise errors.ProtocolError(
                message=f"Slab of shape {self.values.shape} does not match its extent"
                f" {self.extent.shape}",
                rank=self.source,
            )

    def header(self) -> dict[str, Any]:
        return {
            "kind": "slab",
            "timestep": self.timestep,
            "field": self.field,
            "extent": self.extent.as_list(),
            "precision": self.precision.tag,
        }

    @classmethod
    def from_wire(cls, source: int, header: Mapping[str, Any], payload: protocols.Array) -> Self:
        try:
            return cls(
                source=source,
                timestep=int(header["timestep"]),
                field=str(header["field"]),
                extent=SlabExtent.from_list(header["extent"]),
                precision=protocols.Precision.from_tag(int(header["precision"])),
                values=np.asarray(payload),
            )
        except (KeyError, TypeError, ValueError) as error:
            raise errors.ProtocolError(
                message=f"Malformed slab header from rank {source}: {error}", rank=source
            ) from error


## REDUCTIONS


def _identity(operator: protocols.DiagnosticOperator) -> float:
    if operator is protocols.DiagnosticOperator.MAX:
        return -np.inf
    elif operator is protocols.DiagnosticOperator.MIN:
        return np.inf
    return 0.0


@attrs.frozen
class ReductionPartial:
    """
    Per level values of one action over some of the horizontal points.

    Means carry the sum and count separately until the final result.
    """

    output: str
    operator: protocols.DiagnosticOperator
    timestep: int
    values: protocols.Array = attrs.field(eq=False)
    counts: protocols.Array = attrs.field(eq=False)

    @classmethod
    def empty(cls, action: DiagnosticAction, timestep: int, z_size: int) -> Self:
        return cls(
            output=action.output,
            operator=action.operator,
            timestep=timestep,
            values=np.full(z_size, _identity(action.operator)),
            counts=np.zeros(z_size, dtype=np.int64),
        )

    def result(self) -> protocols.Array:
        if self.operator is protocols.DiagnosticOperator.MEAN:
            with np.errstate(invalid="ignore", divide="ignore"):
                return self.values / self.counts
        return self.values.copy()


def reduce_slab(
    action: DiagnosticAction, timestep: int, values: protocols.Array
) -> ReductionPartial:
    """
    Partial result of one action over one (z, y, x) slab
    """
    z_size = values.shape[0]
    partial = ReductionPartial.empty(action, timestep, z_size)
    levels = np.asarray(values, dtype=np.float64).reshape(z_size, -1)
    if levels.shape[1] == 0:
        return partial

    operator = action.operator
    if operator is protocols.DiagnosticOperator.MAX:
        reduced = levels.max(axis=1)
    elif operator is protocols.DiagnosticOperator.MIN:
        reduced = levels.min(axis=1)
    else:
        reduced = levels.sum(axis=1)

    return attrs.evolve(
        partial, values=reduced, counts=np.full(z_size, levels.shape[1], dtype=np.int64)
    )


def merge_partials(partials: Sequence[ReductionPartial]) -> ReductionPartial:
    """
    Combine partials of the same action and timestep in the order given
    """
    if not partials:
        raise errors.ProtocolError(message="Nothing to combine")

    first = partials[0]
    for partial in partials[1:]:
        if partial.timestep != first.timestep:
            raise errors.ProtocolError(
                message=f"Can't combine timestep {partial.timestep} with timestep"
                f" {first.timestep}"
            )
        if partial.output != first.output or partial.operator is not first.operator:
            raise errors.ProtocolError(
                message=f"Can't combine '{partial.output}' with '{first.output}'"
            )

    values = first.values.copy()
    counts = first.counts.copy()
    for partial in partials[1:]:
        if first.operator is protocols.DiagnosticOperator.MAX:
            values = np.maximum(values, partial.values)
        elif first.operator is protocols.DiagnosticOperator.MIN:
            values = np.minimum(values, partial.values)
        else:
            values = values + partial.values
        counts = counts + partial.counts

    return attrs.evolve(first, values=values, counts=counts)


def horizontal_reduction(
    action: DiagnosticAction, slabs: Iterable[protocols.Array], timestep: int = 0
) -> ReductionPartial:
    """
    Reduce every horizontal point of each level over the given slabs
    """
    partials = [reduce_slab(action, timestep, slab) for slab in slabs]
    return merge_partials(partials)


def combine_partials(partials: Sequence[ReductionPartial]) -> protocols.Array:
    return merge_partials(partials).result()


## OUTPUT


@attrs.frozen
class DiagnosticResult:
    output: str
    timestep: int
    values: protocols.Array = attrs.field(eq=False)


def start_diagnostics(path: pathlib.Path | str) -> None:
    try:
        pathlib.Path(path).write_text(CSV_HEADER)
    except OSError as error:
        raise errors.DiagnosticsWriteError(
            message=f"Could not create diagnostics file: {error}", path=str(path)
        ) from error


def write_diagnostics(results: Iterable[DiagnosticResult], path: pathlib.Path | str) -> None:
    """
    Append rows sorted by timestep, output and level.

    All rows are formatted before anything is written, so a timestep is
    written whole or not at all.
    """
    path = pathlib.Path(path)
    ordered = sorted(results, key=lambda result: (result.timestep, result.output))
    rows = [
        f"{result.output},{result.timestep},{level + 1},{float(value)!r}\n"
        for result in ordered
        for level, value in enumerate(result.values)
    ]

    try:
        exists = path.exists() and path.stat().st_size > 0
        with path.open("a") as handle:
            if not exists:
                handle.write(CSV_HEADER)
            handle.write("".join(rows))
            handle.flush()
    except OSError as error:
        raise errors.DiagnosticsWriteError(
            message=f"Could not write diagnostics: {error}", path=str(path)
        ) from error


def read_diagnostics(path: pathlib.Path | str) -> list[tuple[str, int, int, float]]:
    rows: list[tuple[str, int, int, float]] = []
    for line in pathlib.Path(path).read_text().splitlines()[1:]:
        output, timestep, level, value = line.split(",")
        rows.append((output, int(timestep), int(level), float(value)))
    return rows


## SERVER


Reducer = Callable[[DiagnosticAction, int, protocols.Array], ReductionPartial]


@attrs.define
class IoServerStats:
    received: dict[int, list[tuple[int, str]]] = attrs.field(factory=dict)
    compute_seconds: float = 0.0
    emitted: list[int] = attrs.field(factory=list)
    dropped: list[int] = attrs.field(factory=list)
    stale: list[errors.StalenessError] = attrs.field(factory=list)


@attrs.define
class _Timestep:
    timestep: int
    first_seen: float
    expected: set[tuple[int, str]]
    received: set[tuple[int, str]] = attrs.field(factory=set)
    futures: list[tuple[int, Future[ReductionPartial]]] = attrs.field(factory=list)
    partials: dict[int, list[ReductionPartial]] = attrs.field(factory=dict)

    @property
    def local_complete(self) -> bool:
        return self.received >= self.expected

    @property
    def computed(self) -> bool:
        return self.local_complete and all(future.done() for _, future in self.futures)


class IoServer:
    """
    One diagnostics server serving a block of model ranks.

    ``servers`` lists every server rank, the first being the lead which
    combines and writes the results.
    """

    def __init__(
        self,
        config: IoServerConfig,
        transport: protocols.Transport,
        *,
        clients: Sequence[int],
        servers: Sequence[int],
        pool_size: int = DEFAULT_POOL_SIZE,
        staleness_timeout: float = DEFAULT_STALENESS_TIMEOUT,
        output: pathlib.Path | str | None = None,
        reducer: Reducer = reduce_slab,
    ) -> None:
        self.config = config
        self.transport = transport
        self.clients = sorted(clients)
        self.servers = list(servers)
        self.lead = self.servers[0]
        self.pool_size = pool_size
        self.staleness_timeout = staleness_timeout
        self.output = pathlib.Path(output if output is not None else config.output)
        self.reducer = reducer

        self.stats = IoServerStats()
        self.extents: dict[int, SlabExtent] = {}
        self.finished_clients: set[int] = set()
        self.finished_servers: set[int] = set()

        self._pending: dict[int, _Timestep] = {}
        self._closed: set[int] = set()
        self._lock = threading.Lock()
        self._pool: ThreadPoolExecutor | None = None

    @property
    def is_lead(self) -> bool:
        return self.transport.rank == self.lead

    @property
    def done(self) -> bool:
        clients_done = self.finished_clients >= set(self.clients)
        if not self.is_lead:
            return clients_done
        return clients_done and self.finished_servers >= set(self.servers[1:])

    def _expected(self, timestep: int) -> set[tuple[int, str]]:
        due = self.config.due_fields(timestep)
        return {(client, field) for client in self.clients for field in due}

    def _entry(self, timestep: int) -> _Timestep:
        if (entry := self._pending.get(timestep)) is None:
            entry = _Timestep(
                timestep=timestep, first_seen=time.time(), expected=self._expected(timestep)
            )
            self._pending[timestep] = entry
        return entry

    def _timed(
        self, action: DiagnosticAction, timestep: int, values: protocols.Array
    ) -> ReductionPartial:
        started = time.perf_counter()
        try:
            return self.reducer(action, timestep, values)
        finally:
            elapsed = time.perf_counter() - started
            with self._lock:
                self.stats.compute_seconds += elapsed

    def _submit(
        self, action: DiagnosticAction, timestep: int, values: protocols.Array
    ) -> Future[ReductionPartial]:
        if self._pool is None:
            self._pool = ThreadPoolExecutor(
                max_workers=self.pool_size, thread_name_prefix="ioserver"
            )
        return self._pool.submit(self._timed, action, timestep, values)

    ## Message handling

    def handle(
        self, source: int, header: Mapping[str, Any], payload: protocols.Array | None = None
    ) -> None:
        kind = header["kind"]
        if kind == "hello":
            self._hello(source, header)
        elif kind == "slab":
            if payload is None:
                raise errors.ProtocolError(message="Slab header without a slab", rank=source)
            self.handle_slab(DiagnosticMessage.from_wire(source, header, payload))
        elif kind == "partial":
            if payload is None:
                raise errors.ProtocolError(message="Partial header without values", rank=source)
            self._partial(source, header, payload)
        elif kind == "drop":
            self._drop_from_server(source, int(header["timestep"]))
        elif kind == "bye":
            if source in self.clients:
                self.finished_clients.add(source)
            else:
                self.finished_servers.add(source)
        else:
            raise errors.ProtocolError(message=f"Unknown message kind {kind!r}", rank=source)

    def _hello(self, source: int, header: Mapping[str, Any]) -> None:
        if source not in self.clients:
            raise errors.ProtocolError(
                message=f"Rank {source} is not served by this server", rank=source
            )
        self.extents[source] = SlabExtent.from_list(header["extent"])
        self.transport.send(
            source,
            protocols.Tag.DIAG_REPLY,
            encode_header({"kind": "fields", "fields": self.config.cadences}),
        )
        log.info("Registered model rank %d with extent %s", source, self.extents[source])

    def handle_slab(self, message: DiagnosticMessage) -> None:
        source = message.source
        registered = self.extents.get(source)
        if registered is None:
            raise errors.ProtocolError(
                message=f"Rank {source} sent data before hello", rank=source
            )
        if message.extent != registered:
            raise errors.ProtocolError(
                message=f"Rank {source} sent extent {message.extent}, registered {registered}",
                rank=source,
            )

        self.stats.received.setdefault(source, []).append((message.timestep, message.field))
        if message.timestep in self._closed:
            log.warning("Ignoring slab for timestep %d which was dropped", message.timestep)
            return

        entry = self._entry(message.timestep)
        entry.received.add((source, message.field))
        for action in self.config.actions_for(message.field):
            future = self._submit(action, message.timestep, message.values)
            entry.futures.append((source, future))

    def _partial(self, source: int, header: Mapping[str, Any], payload: protocols.Array) -> None:
        timestep = int(header["timestep"])
        if timestep in self._closed:
            return
        outputs = list(header["outputs"])
        by_output = {action.output: action for action in self.config.actions}
        values = np.asarray(payload, dtype=np.float64)
        partials = [
            ReductionPartial(
                output=output,
                operator=by_output[output].operator,
                timestep=timestep,
                values=values[0, index].copy(),
                counts=values[1, index].astype(np.int64),
            )
            for index, output in enumerate(outputs)
        ]
        self._entry(timestep).partials[source] = partials

    def _drop_from_server(self, source: int, timestep: int) -> None:
        log.warning("Server %d dropped timestep %d", source, timestep)
        self._drop(timestep)

    def _drop(self, timestep: int) -> None:
        self._pending.pop(timestep, None)
        self._closed.add(timestep)
        self.stats.dropped.append(timestep)
        if not self.is_lead:
            header = encode_header({"kind": "drop", "timestep": timestep})
            self.transport.send(self.lead, protocols.Tag.DIAG, header)

    ## Progress

    def check_staleness(self) -> list[errors.StalenessError]:
        """
        Drop timesteps still missing slabs long after their first slab arrived
        """
        now = time.time()
        found: list[errors.StalenessError] = []
        for timestep, entry in sorted(self._pending.items()):
            if entry.local_complete or now - entry.first_seen <= self.staleness_timeout:
                continue
            absent = sorted({client for client, _ in entry.expected - entry.received})
            error = errors.StalenessError(
                message=f"Timestep {timestep} is missing slabs from ranks {absent}",
                absent_ranks=absent,
            )
            log.warning("%s, dropping it", error.message)
            found.append(error)
            self.stats.stale.append(error)
            self._drop(timestep)
        return found

    def _local_partials(self, entry: _Timestep) -> list[ReductionPartial]:
        # Combined in rank order so results don't depend on arrival order
        results = sorted(
            ((source, future.result()) for source, future in entry.futures),
            key=lambda pair: pair[0],
        )
        combined: list[ReductionPartial] = []
        for action in self.config.actions:
            mine = [partial for _, partial in results if partial.output == action.output]
            if mine:
                combined.append(merge_partials(mine))
        return combined

    def flush(self) -> None:
        """
        Emit every finished timestep that has no unfinished timestep before it
        """
        while self._pending:
            timestep = min(self._pending)
            entry = self._pending[timestep]
            if not entry.computed:
                return

            if self.transport.rank not in entry.partials:
                entry.partials[self.transport.rank] = self._local_partials(entry)

            if not self.is_lead:
                self._forward(entry)
            elif all(server in entry.partials for server in self.servers):
                self._emit(entry)
            else:
                return

            del self._pending[timestep]
            self._closed.add(timestep)

    def _forward(self, entry: _Timestep) -> None:
        partials = entry.partials[self.transport.rank]
        z_size = self._z_size()
        stacked = np.zeros((2, len(partials), z_size))
        for index, partial in enumerate(partials):
            stacked[0, index] = partial.values
            stacked[1, index] = partial.counts
        header = {
            "kind": "partial",
            "timestep": entry.timestep,
            "outputs": [partial.output for partial in partials],
        }
        self.transport.send(self.lead, protocols.Tag.DIAG, encode_header(header))
        self.transport.send(self.lead, protocols.Tag.DIAG_SLAB, stacked)

    def _z_size(self) -> int:
        for extent in self.extents.values():
            return extent.z_size
        return 0

    def _emit(self, entry: _Timestep) -> None:
        results: list[DiagnosticResult] = []
        for action in self.config.actions:
            partials = [
                partial
                for server in self.servers
                for partial in entry.partials[server]
                if partial.output == action.output
            ]
            if partials:
                results.append(
                    DiagnosticResult(
                        output=action.output,
                        timestep=entry.timestep,
                        values=combine_partials(partials),
                    )
                )
        write_diagnostics(results, self.output)
        self.stats.emitted.append(entry.timestep)

    ## Main loop

    def serve(self, *, poll_interval: float = 0.1) -> IoServerStats:
        """
        Handle messages until every model rank (and, on the lead, every other
        server) has said goodbye
        """
        if self.is_lead:
            start_diagnostics(self.output)
        log.info("io server %d serving ranks %s", self.transport.rank, self.clients)

        try:
            while not self.done:
                received = self.transport.poll(protocols.Tag.DIAG, poll_interval)
                if received is not None:
                    source, payload = received
                    header = decode_header(payload)
                    body = None
                    if header["kind"] in ("slab", "partial"):
                        body = self.transport.recv(source, protocols.Tag.DIAG_SLAB)
                    self.handle(source, header, body)
                self.check_staleness()
                self.flush()

            self._finish()
        finally:
            self.shutdown()

        if not self.is_lead:
            self.transport.send(self.lead, protocols.Tag.DIAG, encode_header({"kind": "bye"}))
        return self.stats

    def shutdown(self) -> None:
        if self._pool is not None:
            self._pool.shutdown(wait=True)
            self._pool = None

    def wait_for_reductions(self) -> None:
        for entry in self._pending.values():
            for _, future in entry.futures:
                future.result()

    def _finish(self) -> None:
        self.wait_for_reductions()
        self.flush()
        for timestep in sorted(self._pending):
            log.warning("Dropping incomplete timestep %d at shutdown", timestep)
            self._drop(timestep)

