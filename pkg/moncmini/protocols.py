"""
A model run is a set of ranks, each of which owns one column-shaped piece of the
global grid and walks the same component lifecycle.

Components are plain callbacks registered with a registry and called with the
model state at three stages: initialisation, every timestep and finalisation.
The model state is the single point of truth for a rank; components talk to
other ranks only through a ``Transport`` and to the diagnostics servers only
through an ``IoBridge``.

The protocols in this module describe those seams so that an alternative
transport (for example one backed by MPI), an alternative transform kernel or
an alternative bridge can be plugged in without touching the rest of the model.
"""

from __future__ import annotations

import enum
from collections.abc import Callable, Mapping, Sequence
from typing import TYPE_CHECKING, Any, Protocol, TypeVar, runtime_checkable

import numpy as np
import numpy.typing as npt

if TYPE_CHECKING:
    from .decomp import Field3D, PencilLayout
    from .ioserver import DiagnosticMessage
    from .state import ModelState

T_Result = TypeVar("T_Result")

Array = npt.NDArray[Any]

LoggingContext = Mapping[str, str | int | float | bool | None]


class NotGiven(type):
    pass


class _NotGiven(metaclass=NotGiven):
    """
    Used to represent an argument not being provided a value
    """


class Precision(enum.Enum):
    """
    Working precision of a field or a solver.
    """

    SINGLE = "single"
    DOUBLE = "double"

    @property
    def dtype(self) -> np.dtype[Any]:
        if self is Precision.SINGLE:
            return np.dtype(np.float32)
        return np.dtype(np.float64)

    @property
    def complex_dtype(self) -> np.dtype[Any]:
        if self is Precision.SINGLE:
            return np.dtype(np.complex64)
        return np.dtype(np.complex128)

    @property
    def tag(self) -> int:
        """
        Width in bytes, as stored in checkpoint field records
        """
        return self.dtype.itemsize

    @classmethod
    def from_dtype(cls, dtype: npt.DTypeLike) -> Precision:
        kind = np.dtype(dtype)
        if kind in (np.dtype(np.float32), np.dtype(np.complex64)):
            return cls.SINGLE
        return cls.DOUBLE

    @classmethod
    def from_tag(cls, tag: int) -> Precision:
        for precision in cls:
            if precision.tag == tag:
                return precision
        raise ValueError(f"Unknown precision tag {tag}")


class Orientation(enum.Enum):
    """
    The axis along which a rank holds complete lines of data.
    """

    Z = "z"
    Y = "y"
    X = "x"


class ReductionOp(enum.Enum):
    SUM = "sum"
    MAX = "max"
    MIN = "min"

    @property
    def combine(self) -> Callable[[Array, Array], Array]:
        if self is ReductionOp.SUM:
            return np.add
        elif self is ReductionOp.MAX:
            return np.maximum
        return np.minimum


class DiagnosticOperator(enum.Enum):
    MEAN = "mean"
    MAX = "max"
    MIN = "min"
    SUM = "sum"


class Stage(enum.Enum):
    INIT = "init"
    TIMESTEP = "timestep"
    FINALISE = "finalise"


class Tag(enum.IntEnum):
    """
    Message tags. Messages between a pair of ranks with the same tag are
    delivered in the order they were sent.
    """

    HALO_Y_UP = 1
    HALO_Y_DOWN = 2
    HALO_X_UP = 3
    HALO_X_DOWN = 4
    REDUCE = 10
    REDUCE_RESULT = 11
    ALLTOALL = 12
    GATHER = 13
    DIAG = 20
    DIAG_SLAB = 21
    DIAG_REPLY = 22
    RENDEZVOUS = 30
    HELLO = 31
    CLOSE = 32


class Callback(Protocol):
    def __call__(self, state: ModelState, /) -> None:
        ...


@runtime_checkable
class Transport(Protocol):
    """
    An endpoint owned by one rank.

    Collective operations must be entered by every rank of the transport or
    the run deadlocks.
    """

    @property
    def rank(self) -> int:
        ...

    @property
    def size(self) -> int:
        ...

    def send(self, dest: int, tag: int, payload: Array, /) -> None:
        """
        Queue a copy of payload for dest and return without waiting for it
        to be received.
        """

    def recv(self, source: int, tag: int, /) -> Array:
        """
        Return the oldest message from source with this tag, waiting for one
        to arrive.
        """

    def poll(self, tag: int, timeout: float, /) -> tuple[int, Array] | None:
        """
        Return the oldest message from any source with this tag, or None if
        nothing arrived within timeout seconds.
        """

    def allreduce(self, values: Array, combine: Callable[[Array, Array], Array], /) -> Array:
        """
        Combine values across all ranks in a fixed order and return the same
        result on every rank.
        """

    def alltoall(self, peers: Sequence[int], chunks: Mapping[int, Array], /) -> dict[int, Array]:
        """
        Send chunks[peer] to every peer and return what each peer sent back.
        """

    def close(self) -> None:
        ...


class TransformPlan(Protocol):
    """
    A one dimensional transform of a fixed length.

    Forward is unnormalised, backward is normalised by 1/n.
    """

    @property
    def n(self) -> int:
        ...

    @property
    def real(self) -> bool:
        ...

    def forward(self, data: Array, axis: int, /) -> Array:
        ...

    def backward(self, data: Array, axis: int, /) -> Array:
        ...


class TransformKernel(Protocol):
    def plan(self, n: int, /, *, real: bool) -> TransformPlan:
        ...


@runtime_checkable
class PressureSolver(Protocol):
    """
    Solves the discrete Poisson equation for the pressure.
    """

    @property
    def name(self) -> str:
        ...

    def solve(self, rhs: Field3D, transport: Transport, /) -> Field3D:
        ...


@runtime_checkable
class IoBridge(Protocol):
    """
    The model side of the diagnostics servers.
    """

    def handshake(self, layout: PencilLayout, /) -> Mapping[str, int]:
        """
        Register this rank with its server and return the requested fields
        mapped to the cadence they should be sent at.
        """

    def submit(self, message: DiagnosticMessage, /) -> None:
        """
        Enqueue a message for transmission and return without waiting for the
        server to process it.
        """

    def close(self) -> None:
        ...


if TYPE_CHECKING:
    P_Transport = Transport
    P_TransformPlan = TransformPlan
    P_TransformKernel = TransformKernel
    P_PressureSolver = PressureSolver
    P_IoBridge = IoBridge
