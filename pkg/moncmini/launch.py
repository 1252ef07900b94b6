"""
Start one execution context per rank and collect what each returns.
"""

from __future__ import annotations

import logging
import multiprocessing
import os
import queue
import threading
import time
from collections.abc import Callable
from typing import Any, Literal

from . import errors, protocols
from .transport import DEFAULT_RECV_TIMEOUT, InProcessWorld, Rendezvous, SocketTransport

log = logging.getLogger(__name__)

TransportKind = Literal["inprocess", "socket"]

RankTarget = Callable[[protocols.Transport], protocols.T_Result]

# Seconds other ranks get to finish once one rank has failed
FAILURE_GRACE = 5.0


def _first_failure(failures: dict[int, BaseException]) -> BaseException:
    """
    Prefer the root cause over the communication errors it caused elsewhere
    """
    for rank in sorted(failures):
        if not isinstance(failures[rank], errors.CommunicationError):
            return failures[rank]
    return failures[min(failures)]


def run_world(
    size: int,
    target: Callable[[protocols.Transport], protocols.T_Result],
    *,
    kind: TransportKind = "inprocess",
    coord: str | None = None,
    recv_timeout: float = DEFAULT_RECV_TIMEOUT,
) -> list[protocols.T_Result]:
    """
    Run target once per rank and return the results in rank order.

    The first rank failure is re-raised once every rank has stopped.
    """
    if kind == "inprocess":
        return _run_threads(size, target, recv_timeout=recv_timeout)
    elif kind == "socket":
        return _run_processes(size, target, coord=coord, recv_timeout=recv_timeout)
    raise errors.ConfigurationError(message=f"Unknown transport {kind!r}", key="transport")


def _run_threads(
    size: int, target: RankTarget[protocols.T_Result], *, recv_timeout: float
) -> list[protocols.T_Result]:
    world = InProcessWorld(size, recv_timeout=recv_timeout)
    results: dict[int, protocols.T_Result] = {}
    failures: dict[int, BaseException] = {}
    lock = threading.Lock()

    def run(rank: int) -> None:
        endpoint = world.endpoint(rank)
        try:
            result = target(endpoint)
        except BaseException as error:
            with lock:
                failures[rank] = error
            world.abort(f"Rank {rank} failed: {error!r}")
        else:
            with lock:
                results[rank] = result
        finally:
            endpoint.close()

    threads = [
        threading.Thread(target=run, args=(rank,), name=f"rank-{rank}", daemon=True)
        for rank in range(size)
    ]
    for thread in threads:
        thread.start()
    for thread in threads:
        thread.join()

    if failures:
        raise _first_failure(failures)
    return [results[rank] for rank in range(size)]


def _socket_rank(
    rank: int,
    size: int,
    coord: str,
    target: RankTarget[Any],
    outcomes: multiprocessing.Queue[tuple[int, bool, Any]],
    recv_timeout: float,
) -> None:
    try:
        endpoint = SocketTransport.connect(rank, size, coord, recv_timeout=recv_timeout)
    except BaseException as error:
        outcomes.put((rank, False, error))
        return

    try:
        outcomes.put((rank, True, target(endpoint)))
    except BaseException as error:
        outcomes.put((rank, False, error))
    finally:
        endpoint.close()


def _run_processes(
    size: int,
    target: RankTarget[protocols.T_Result],
    *,
    coord: str | None,
    recv_timeout: float,
) -> list[protocols.T_Result]:
    context = multiprocessing.get_context("spawn")
    address = coord or os.environ.get("MONC_COORD") or "127.0.0.1:0"
    rendezvous = Rendezvous(size, address=address)
    rendezvous.start()

    outcomes: multiprocessing.Queue[tuple[int, bool, Any]] = context.Queue()
    processes = [
        context.Process(
            target=_socket_rank,
            args=(rank, size, rendezvous.address, target, outcomes, recv_timeout),
            name=f"rank-{rank}",
        )
        for rank in range(size)
    ]
    for process in processes:
        process.start()

    results: dict[int, protocols.T_Result] = {}
    failures: dict[int, BaseException] = {}
    deadline: float | None = None
    try:
        while len(results) + len(failures) < size:
            try:
                rank, ok, value = outcomes.get(timeout=0.5)
            except queue.Empty:
                reported = set(results) | set(failures)
                silent = [
                    rank
                    for rank, process in enumerate(processes)
                    if rank not in reported and process.exitcode is not None
                ]
                if silent and deadline is None:
                    deadline = time.monotonic() + FAILURE_GRACE
                if deadline is not None and time.monotonic() > deadline:
                    for rank in sorted(set(range(size)) - reported):
                        failures[rank] = errors.CommunicationError(
                            message=f"Rank {rank} did not finish", rank=rank
                        )
                    break
                continue

            if ok:
                results[rank] = value
            else:
                failures[rank] = value
                if deadline is None:
                    deadline = time.monotonic() + FAILURE_GRACE
    finally:
        for process in processes:
            process.join(timeout=FAILURE_GRACE)
            if process.is_alive():
                log.warning("Terminating rank process %s", process.name)
                process.terminate()
                process.join()
        rendezvous.join(timeout=FAILURE_GRACE)

    if failures:
        raise _first_failure(failures)
    return [results[rank] for rank in range(size)]
