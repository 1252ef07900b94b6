"""
Point to point messaging between ranks and the collectives built on it.

Every rank owns a mailbox. Senders drop copies of their arrays into the
receiver's mailbox, keyed by (source, tag), so messages between a pair of ranks
with the same tag are taken out in the order they were put in.

Two worlds are provided. ``InProcessWorld`` runs every rank as a thread of one
process and is what the tests use. ``SocketTransport`` connects one process per
rank over local TCP sockets and is what the scaling harness uses.
"""

from __future__ import annotations

import abc
import itertools
import json
import logging
import math
import socket
import struct
import threading
import time
from collections import Counter, defaultdict, deque
from collections.abc import Callable, Mapping, Sequence
from typing import TYPE_CHECKING, cast

import numpy as np

from . import errors, protocols

log = logging.getLogger(__name__)

DEFAULT_RECV_TIMEOUT = 120.0

_FRAME_HEADER = struct.Struct("<IIQ")
_ARRAY_PREFIX = struct.Struct("<BB")


class Mailbox:
    def __init__(self) -> None:
        self._condition = threading.Condition()
        self._queues: dict[tuple[int, int], deque[tuple[int, protocols.Array]]] = defaultdict(
            deque
        )
        self._sequence = itertools.count()
        self._lost: dict[int, str] = {}
        self._left: dict[int, str] = {}
        self._failure: str | None = None

    def deliver(self, source: int, tag: int, payload: protocols.Array) -> None:
        with self._condition:
            self._queues[(source, tag)].append((next(self._sequence), payload))
            self._condition.notify_all()

    def lose(self, source: int, reason: str, *, clean: bool = False) -> None:
        """
        Nothing more will arrive from source.

        A clean departure only fails receives waiting on that source, a lost
        connection also fails receives from any source.
        """
        with self._condition:
            if clean:
                self._left[source] = reason
            else:
                self._lost[source] = reason
            self._condition.notify_all()

    def fail(self, reason: str) -> None:
        """
        Nothing more will arrive from anyone
        """
        with self._condition:
            self._failure = reason
            self._condition.notify_all()

    def _find(self, source: int | None, tag: int) -> tuple[int, protocols.Array] | None:
        if source is not None:
            queue = self._queues.get((source, tag))
            if queue:
                return source, queue.popleft()[1]
            return None

        best: tuple[int, int] | None = None
        for (sender, queued_tag), queue in self._queues.items():
            if queued_tag == tag and queue and (best is None or queue[0][0] < best[1]):
                best = (sender, queue[0][0])

        if best is None:
            return None
        return best[0], self._queues[(best[0], tag)].popleft()[1]

    def take(
        self, source: int | None, tag: int, timeout: float, *, raise_on_timeout: bool = True
    ) -> tuple[int, protocols.Array] | None:
        deadline = time.monotonic() + timeout
        with self._condition:
            while True:
                found = self._find(source, tag)
                if found is not None:
                    return found

                if self._failure is not None:
                    raise errors.CommunicationError(message=self._failure, rank=source)

                if source is not None and (source in self._lost or source in self._left):
                    reason = self._lost.get(source) or self._left[source]
                    raise errors.CommunicationError(message=reason, rank=source)

                if source is None and self._lost:
                    lost = min(self._lost)
                    raise errors.CommunicationError(message=self._lost[lost], rank=lost)

                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    if not raise_on_timeout:
                        return None
                    raise errors.CommunicationError(
                        message=f"Timed out after {timeout}s waiting for tag {tag}",
                        rank=source,
                    )
                self._condition.wait(remaining)


class TransportBase(abc.ABC):
    """
    Receives and collectives on top of a mailbox; subclasses only deliver.
    """

    _mailbox: Mailbox
    recv_timeout: float

    @property
    @abc.abstractmethod
    def rank(self) -> int:
        ...

    @property
    @abc.abstractmethod
    def size(self) -> int:
        ...

    @abc.abstractmethod
    def send(self, dest: int, tag: int, payload: protocols.Array, /) -> None:
        ...

    def close(self) -> None:
        pass

    def recv(self, source: int, tag: int, /) -> protocols.Array:
        found = self._mailbox.take(source, tag, self.recv_timeout)
        assert found is not None
        return found[1]

    def poll(self, tag: int, timeout: float, /) -> tuple[int, protocols.Array] | None:
        return self._mailbox.take(None, tag, timeout, raise_on_timeout=False)

    def allreduce(
        self,
        values: protocols.Array,
        combine: Callable[[protocols.Array, protocols.Array], protocols.Array],
        /,
    ) -> protocols.Array:
        """
        Binary tree reduction in ascending rank order followed by a broadcast
        down the same tree.

        Each packet carries a leading flag which is nonzero when some rank
        found the vector lengths did not agree.
        """
        values = np.asarray(values)
        rank, size = self.rank, self.size
        packet = np.concatenate((np.zeros(1, dtype=values.dtype), values.ravel()))
        poison = np.ones(1, dtype=values.dtype)

        step = 1
        while step < size:
            if rank % (2 * step):
                self.send(rank - step, protocols.Tag.REDUCE, packet)
                break
            if rank + step < size:
                other = self.recv(rank + step, protocols.Tag.REDUCE)
                if packet[0] != 0 or other.shape != packet.shape or other[0] != 0:
                    packet = poison
                else:
                    packet = np.concatenate((packet[:1], combine(packet[1:], other[1:])))
            step *= 2

        if rank == 0:
            step = 1 << max(size - 1, 0).bit_length() >> 1
        else:
            lowest = rank & -rank
            packet = self.recv(rank - lowest, protocols.Tag.REDUCE_RESULT)
            step = lowest >> 1

        while step >= 1:
            if rank + step < size:
                self.send(rank + step, protocols.Tag.REDUCE_RESULT, packet)
            step >>= 1

        if packet.shape != (values.size + 1,) or packet[0] != 0:
            raise errors.ProtocolError(
                message="Ranks entered a reduction with vectors of different lengths",
                rank=rank,
            )
        return packet[1:].reshape(values.shape)

    def alltoall(
        self, peers: Sequence[int], chunks: Mapping[int, protocols.Array], /
    ) -> dict[int, protocols.Array]:
        result: dict[int, protocols.Array] = {}
        for peer in peers:
            if peer == self.rank:
                result[peer] = np.array(chunks[peer], copy=True)
            else:
                self.send(peer, protocols.Tag.ALLTOALL, chunks[peer])

        for peer in peers:
            if peer != self.rank:
                result[peer] = self.recv(peer, protocols.Tag.ALLTOALL)
        return result


class InProcessWorld:
    """
    A world of ranks running as threads of this process
    """

    def __init__(self, size: int, *, recv_timeout: float = DEFAULT_RECV_TIMEOUT) -> None:
        if size < 1:
            raise errors.DecompositionError(message=f"A world needs at least one rank, got {size}")
        self.size = size
        self.recv_timeout = recv_timeout
        self.mailboxes = [Mailbox() for _ in range(size)]

    def endpoint(self, rank: int) -> InProcessTransport:
        return InProcessTransport(self, rank)

    def abort(self, reason: str) -> None:
        for mailbox in self.mailboxes:
            mailbox.fail(reason)


class InProcessTransport(TransportBase):
    def __init__(self, world: InProcessWorld, rank: int) -> None:
        self._world = world
        self._rank = rank
        self._mailbox = world.mailboxes[rank]
        self.recv_timeout = world.recv_timeout

    @property
    def rank(self) -> int:
        return self._rank

    @property
    def size(self) -> int:
        return self._world.size

    def send(self, dest: int, tag: int, payload: protocols.Array, /) -> None:
        if not 0 <= dest < self._world.size:
            raise errors.CommunicationError(message=f"No rank {dest} to send to", rank=dest)
        self._world.mailboxes[dest].deliver(self._rank, int(tag), np.array(payload, copy=True))


def encode_array(payload: protocols.Array) -> bytes:
    """
    A little endian header of dtype string length and dimension count, the
    dtype string, each dimension as a u64, then the raw little endian values.
    """
    array = np.asarray(payload)
    dtype = array.dtype.newbyteorder("<")
    array = np.ascontiguousarray(array, dtype=dtype)
    descr = dtype.str.encode("ascii")
    shape = struct.pack(f"<{array.ndim}Q", *array.shape)
    return _ARRAY_PREFIX.pack(len(descr), array.ndim) + descr + shape + array.tobytes()


def decode_array(data: bytes) -> protocols.Array:
    descr_length, ndim = _ARRAY_PREFIX.unpack_from(data)
    offset = _ARRAY_PREFIX.size
    dtype = np.dtype(data[offset : offset + descr_length].decode("ascii"))
    offset += descr_length
    shape = struct.unpack_from(f"<{ndim}Q", data, offset)
    offset += 8 * ndim

    count = math.prod(shape)
    if len(data) - offset != count * dtype.itemsize:
        raise errors.CommunicationError(
            message=f"Array of {dtype} {shape} arrived with {len(data) - offset} bytes"
        )
    if count == 0:
        return np.empty(shape, dtype=dtype)
    return np.frombuffer(data, dtype=dtype, count=count, offset=offset).reshape(shape).copy()


def _read_exact(sock: socket.socket, size: int) -> bytes:
    chunks: list[bytes] = []
    remaining = size
    while remaining:
        chunk = sock.recv(min(remaining, 1 << 20))
        if not chunk:
            raise ConnectionError("Connection closed mid frame")
        chunks.append(chunk)
        remaining -= len(chunk)
    return b"".join(chunks)


def write_frame(sock: socket.socket, tag: int, source: int, payload: bytes) -> None:
    sock.sendall(_FRAME_HEADER.pack(tag, source, len(payload)) + payload)


def read_frame(sock: socket.socket) -> tuple[int, int, bytes]:
    tag, source, length = _FRAME_HEADER.unpack(_read_exact(sock, _FRAME_HEADER.size))
    return tag, source, _read_exact(sock, length)


def parse_address(address: str) -> tuple[str, int]:
    host, _, port = address.rpartition(":")
    if not host or not port.isdigit():
        raise errors.ConfigurationError(
            message=f"Expected HOST:PORT for the coordinator, got {address!r}", key="coord"
        )
    return host, int(port)


class Rendezvous:
    """
    Tells every rank where every other rank is listening.

    Each rank connects, registers the address of its own listener and then
    receives the table of all addresses once every rank has registered.
    """

    def __init__(self, size: int, *, address: str = "127.0.0.1:0") -> None:
        self.size = size
        self._server = socket.create_server(parse_address(address))
        self._thread = threading.Thread(target=self._serve, name="rendezvous", daemon=True)
        self.error: Exception | None = None

    @property
    def address(self) -> str:
        host, port = self._server.getsockname()[:2]
        return f"{host}:{port}"

    def start(self) -> Rendezvous:
        self._thread.start()
        return self

    def _serve(self) -> None:
        connections: dict[int, socket.socket] = {}
        table: dict[int, tuple[str, int]] = {}
        try:
            while len(connections) < self.size:
                conn, _ = self._server.accept()
                tag, source, payload = read_frame(conn)
                if tag != protocols.Tag.RENDEZVOUS:
                    conn.close()
                    continue
                registered = json.loads(payload)
                table[source] = (registered["host"], registered["port"])
                connections[source] = conn

            reply = json.dumps({str(rank): list(address) for rank, address in table.items()})
            for conn in connections.values():
                write_frame(conn, protocols.Tag.RENDEZVOUS, 0, reply.encode())
        except Exception as error:
            self.error = error
            log.exception("Rendezvous failed")
        finally:
            for conn in connections.values():
                conn.close()
            self._server.close()

    def join(self, timeout: float | None = None) -> None:
        self._thread.join(timeout)


class SocketTransport(TransportBase):
    """
    One process per rank, fully connected with TCP sockets.

    Frames are a u32 tag, u32 source rank and u64 payload length followed by
    the payload, which for arrays is ``encode_array``'s header and raw bytes.
    """

    def __init__(
        self,
        rank: int,
        size: int,
        connections: dict[int, socket.socket],
        *,
        recv_timeout: float = DEFAULT_RECV_TIMEOUT,
    ) -> None:
        self._rank = rank
        self._size = size
        self._connections = connections
        self._locks = {peer: threading.Lock() for peer in connections}
        self._mailbox = Mailbox()
        self._closing = threading.Event()
        self.recv_timeout = recv_timeout
        self._readers = [
            threading.Thread(target=self._read, args=(peer, conn), daemon=True)
            for peer, conn in connections.items()
        ]
        for reader in self._readers:
            reader.start()

    @classmethod
    def connect(
        cls,
        rank: int,
        size: int,
        coord: str,
        *,
        recv_timeout: float = DEFAULT_RECV_TIMEOUT,
    ) -> SocketTransport:
        listener = socket.create_server(("127.0.0.1", 0))
        host, port = listener.getsockname()[:2]

        try:
            address = parse_address(coord)
            with socket.create_connection(address, timeout=recv_timeout) as coordinator:
                registration = json.dumps({"host": host, "port": port}).encode()
                write_frame(coordinator, protocols.Tag.RENDEZVOUS, rank, registration)
                _, _, payload = read_frame(coordinator)
            table = {int(peer): (str(a[0]), int(a[1])) for peer, a in json.loads(payload).items()}

            connections: dict[int, socket.socket] = {}
            for peer in range(rank):
                conn = socket.create_connection(table[peer], timeout=recv_timeout)
                write_frame(conn, protocols.Tag.HELLO, rank, b"")
                connections[peer] = conn

            listener.settimeout(recv_timeout)
            while len(connections) < size - 1:
                conn, _ = listener.accept()
                conn.settimeout(recv_timeout)
                _, peer, _ = read_frame(conn)
                connections[peer] = conn
        except OSError as error:
            raise errors.CommunicationError(
                message=f"Rank {rank} could not join the world: {error}", rank=rank
            ) from error
        finally:
            listener.close()

        for conn in connections.values():
            conn.settimeout(None)
            conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)

        log.debug("Rank %d connected to %d peers", rank, len(connections))
        return cls(rank, size, connections, recv_timeout=recv_timeout)

    @property
    def rank(self) -> int:
        return self._rank

    @property
    def size(self) -> int:
        return self._size

    def _read(self, peer: int, conn: socket.socket) -> None:
        try:
            while True:
                tag, source, payload = read_frame(conn)
                if tag == protocols.Tag.CLOSE:
                    break
                self._mailbox.deliver(source, tag, decode_array(payload))
        except (OSError, ValueError) as error:
            if not self._closing.is_set():
                self._mailbox.lose(peer, f"Lost connection to rank {peer}: {error}")
        else:
            if not self._closing.is_set():
                self._mailbox.lose(peer, f"Rank {peer} has left the world", clean=True)

    def send(self, dest: int, tag: int, payload: protocols.Array, /) -> None:
        if dest == self._rank:
            self._mailbox.deliver(self._rank, int(tag), np.array(payload, copy=True))
            return

        if dest not in self._connections:
            raise errors.CommunicationError(message=f"No rank {dest} to send to", rank=dest)

        encoded = encode_array(payload)
        try:
            with self._locks[dest]:
                write_frame(self._connections[dest], int(tag), self._rank, encoded)
        except OSError as error:
            raise errors.CommunicationError(
                message=f"Failed to send to rank {dest}: {error}", rank=dest
            ) from error

    def close(self) -> None:
        """
        Tell every peer we are done and stop writing.

        Readers keep draining until each peer says the same so nothing a slow
        peer sent is reset on the wire.
        """
        self._closing.set()
        for peer, conn in self._connections.items():
            try:
                with self._locks[peer]:
                    write_frame(conn, protocols.Tag.CLOSE, self._rank, b"")
                    conn.shutdown(socket.SHUT_WR)
            except OSError:
                pass


class SubWorld(TransportBase):
    """
    The first ``size`` ranks of a bigger world seen as a world of their own.

    Model ranks use this so their collectives never involve the io servers.
    """

    def __init__(self, inner: TransportBase, size: int) -> None:
        if not 0 <= inner.rank < size <= inner.size:
            raise errors.DecompositionError(
                message=f"Rank {inner.rank} is not part of a sub world of {size} ranks"
            )
        self._inner = inner
        self._size = size
        self._mailbox = inner._mailbox
        self.recv_timeout = inner.recv_timeout

    @property
    def rank(self) -> int:
        return self._inner.rank

    @property
    def size(self) -> int:
        return self._size

    def send(self, dest: int, tag: int, payload: protocols.Array, /) -> None:
        self._inner.send(dest, tag, payload)


class CountingTransport(TransportBase):
    """
    Wraps a transport and counts what passes through it
    """

    def __init__(self, inner: TransportBase) -> None:
        self._inner = inner
        self._mailbox = inner._mailbox
        self.recv_timeout = inner.recv_timeout
        self.sends: Counter[int] = Counter()
        self.reductions = 0
        self.alltoalls = 0

    @property
    def rank(self) -> int:
        return self._inner.rank

    @property
    def size(self) -> int:
        return self._inner.size

    @property
    def halo_exchanges(self) -> int:
        return self.sends[protocols.Tag.HALO_Y_UP]

    def reset(self) -> None:
        self.sends.clear()
        self.reductions = 0
        self.alltoalls = 0

    def send(self, dest: int, tag: int, payload: protocols.Array, /) -> None:
        self.sends[int(tag)] += 1
        self._inner.send(dest, tag, payload)

    def allreduce(
        self,
        values: protocols.Array,
        combine: Callable[[protocols.Array, protocols.Array], protocols.Array],
        /,
    ) -> protocols.Array:
        self.reductions += 1
        return super().allreduce(values, combine)

    def alltoall(
        self, peers: Sequence[int], chunks: Mapping[int, protocols.Array], /
    ) -> dict[int, protocols.Array]:
        self.alltoalls += 1
        return super().alltoall(peers, chunks)


if TYPE_CHECKING:
    _IPT: protocols.P_Transport = cast(InProcessTransport, None)
    _ST: protocols.P_Transport = cast(SocketTransport, None)
    _SW: protocols.P_Transport = cast(SubWorld, None)
    _CT: protocols.P_Transport = cast(CountingTransport, None)
