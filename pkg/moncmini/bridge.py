"""
The model side of the diagnostics servers.

Submitting puts the message on a bounded queue and returns. A background
thread takes messages off the queue in order and sends them to the server, so
the model never waits for the server. A full queue is the one case where
submitting blocks.
"""

from __future__ import annotations

import logging
import queue
import threading
import time
from collections.abc import Mapping
from typing import TYPE_CHECKING, cast

from . import errors, protocols
from .decomp import PencilLayout
from .ioserver import DiagnosticMessage, SlabExtent, decode_header, encode_header

log = logging.getLogger(__name__)

DEFAULT_CAPACITY = 64


class TransportBridge:
    def __init__(
        self,
        transport: protocols.Transport,
        server_rank: int,
        *,
        capacity: int = DEFAULT_CAPACITY,
    ) -> None:
        if capacity < 1:
            raise errors.ConfigurationError(
                message=f"Queue capacity must be at least 1, got {capacity}",
                key="ios_queue_capacity",
            )
        self.transport = transport
        self.server_rank = server_rank
        self.capacity = capacity
        self.extent: SlabExtent | None = None
        self.cadences: dict[str, int] = {}

        self.submitted = 0
        self.submit_seconds = 0.0

        self._queue: queue.Queue[DiagnosticMessage | None] = queue.Queue(maxsize=capacity)
        self._sender: threading.Thread | None = None
        self._error: errors.TransmissionError | None = None
        self._closed = False

    def handshake(self, layout: PencilLayout, /) -> Mapping[str, int]:
        self.extent = SlabExtent.for_layout(layout)
        hello = {"kind": "hello", "extent": self.extent.as_list()}
        try:
            self.transport.send(self.server_rank, protocols.Tag.DIAG, encode_header(hello))
            reply = decode_header(self.transport.recv(self.server_rank, protocols.Tag.DIAG_REPLY))
        except errors.CommunicationError as error:
            raise errors.TransmissionError(
                message=f"Handshake with io server {self.server_rank} failed: {error.message}",
                rank=self.server_rank,
            ) from error

        self.cadences = {str(name): int(n) for name, n in reply.get("fields", {}).items()}
        self._sender = threading.Thread(
            target=self._send_loop, name=f"bridge-{self.transport.rank}", daemon=True
        )
        self._sender.start()
        log.info("Connected to io server %d, sending %s", self.server_rank, self.cadences)
        return dict(self.cadences)

    def _send_loop(self) -> None:
        while True:
            message = self._queue.get()
            if message is None:
                return
            if self._error is not None:
                continue
            try:
                header = encode_header(message.header())
                self.transport.send(self.server_rank, protocols.Tag.DIAG, header)
                self.transport.send(self.server_rank, protocols.Tag.DIAG_SLAB, message.values)
            except errors.CommunicationError as error:
                self._error = errors.TransmissionError(
                    message=f"Lost the io server {self.server_rank}: {error.message}",
                    rank=self.server_rank,
                )
                log.error(self._error.message)

    def submit(self, message: DiagnosticMessage, /) -> None:
        if self._sender is None or self._closed:
            raise errors.TransmissionError(
                message="Submitting to a bridge that is not connected", rank=self.server_rank
            )
        if self._error is not None:
            raise self._error

        started = time.perf_counter()
        self._queue.put(message)
        self.submit_seconds += time.perf_counter() - started
        self.submitted += 1

    def close(self) -> None:
        """
        Send everything still queued, then tell the server we are done
        """
        if self._closed:
            return
        self._closed = True
        if self._sender is not None:
            self._queue.put(None)
            self._sender.join()

        if self._error is not None:
            raise self._error
        try:
            bye = encode_header({"kind": "bye"})
            self.transport.send(self.server_rank, protocols.Tag.DIAG, bye)
        except errors.CommunicationError as error:
            raise errors.TransmissionError(
                message=f"Could not say goodbye to io server {self.server_rank}: {error.message}",
                rank=self.server_rank,
            ) from error
        log.debug(
            "Bridge closed after %d submissions taking %.6fs", self.submitted, self.submit_seconds
        )


def submit_field(handle: protocols.IoBridge, msg: DiagnosticMessage) -> None:
    handle.submit(msg)


if TYPE_CHECKING:
    _TB: protocols.P_IoBridge = cast(TransportBridge, None)
