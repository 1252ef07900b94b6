"""
The global grid is split over a py by px grid of workers. Every worker owns
complete vertical columns (a Z pencil) for a rectangle of the horizontal plane
and keeps a halo of neighbouring values around that rectangle.

The spectral solver also needs complete lines along X and along Y. Those are
reached by exchanging blocks within a row of workers (Z and X pencils) and
within a column of workers (X and Y pencils).

Ranks are laid out row major: ``rank = iy * px + ix``.
"""

from __future__ import annotations

import logging
import math
from collections.abc import Mapping
from typing import Any, Self

import attrs
import numpy as np

from . import errors, protocols
from .options import OptionsDatabase

log = logging.getLogger(__name__)

Extent = tuple[int, int]
Shape = tuple[int, int, int]


def _positive_size(instance: object, attribute: attrs.Attribute[int], value: int) -> None:
    if value < 1:
        raise errors.ConfigurationError(
            message=f"{attribute.name} must be at least 1, got {value}", key=attribute.name
        )


def _positive_spacing(instance: object, attribute: attrs.Attribute[float], value: float) -> None:
    if not value > 0:
        raise errors.ConfigurationError(
            message=f"{attribute.name} must be greater than zero, got {value}",
            key=attribute.name,
        )


@attrs.frozen
class GlobalGrid:
    """
    Periodic in X and Y, bounded in Z.
    """

    z_size: int = attrs.field(validator=_positive_size)
    y_size: int = attrs.field(validator=_positive_size)
    x_size: int = attrs.field(validator=_positive_size)
    dz: float = attrs.field(default=1.0, validator=_positive_spacing)
    dy: float = attrs.field(default=1.0, validator=_positive_spacing)
    dx: float = attrs.field(default=1.0, validator=_positive_spacing)

    @classmethod
    def from_options(cls, options: OptionsDatabase) -> Self:
        return cls(
            z_size=options.get_int("z_size"),
            y_size=options.get_int("y_size"),
            x_size=options.get_int("x_size"),
            dz=options.get_real("dz"),
            dy=options.get_real("dy"),
            dx=options.get_real("dx"),
        )

    @property
    def shape(self) -> Shape:
        return (self.z_size, self.y_size, self.x_size)

    @property
    def points(self) -> int:
        return self.z_size * self.y_size * self.x_size


def balanced_split(n: int, parts: int, index: int) -> Extent:
    """
    Return (start, size) of part ``index`` when n cells are split into parts
    whose sizes differ by at most one. Earlier parts get the extra cells.
    """
    base, remainder = divmod(n, parts)
    size = base + (1 if index < remainder else 0)
    start = index * base + min(index, remainder)
    return start, size


def worker_grid(workers: int) -> tuple[int, int]:
    """
    The most square (py, px) with py * px == workers and py <= px
    """
    if workers < 1:
        raise errors.DecompositionError(message=f"Need at least one worker, got {workers}")
    py = math.isqrt(workers)
    while workers % py:
        py -= 1
    return py, workers // py


def _candidate_grids(workers: int) -> list[tuple[int, int]]:
    pairs = [(py, workers // py) for py in range(1, workers + 1) if workers % py == 0]
    return sorted(pairs, key=lambda pair: (abs(pair[0] - pair[1]), pair[0] > pair[1]))


@attrs.frozen
class PencilLayout:
    grid: GlobalGrid
    py: int
    px: int
    rank: int
    halo_width: int = 1

    def __attrs_post_init__(self) -> None:
        if self.halo_width < 1:
            raise errors.DecompositionError(
                message=f"Halo width must be at least 1, got {self.halo_width}"
            )
        if not 0 <= self.rank < self.workers:
            raise errors.DecompositionError(
                message=f"Rank {self.rank} is outside a world of {self.workers} workers"
            )

    @property
    def workers(self) -> int:
        return self.py * self.px

    @property
    def iy(self) -> int:
        return self.rank // self.px

    @property
    def ix(self) -> int:
        return self.rank % self.px

    @property
    def y_extent(self) -> Extent:
        return balanced_split(self.grid.y_size, self.py, self.iy)

    @property
    def x_extent(self) -> Extent:
        return balanced_split(self.grid.x_size, self.px, self.ix)

    @property
    def local_shape(self) -> Shape:
        return (self.grid.z_size, self.y_extent[1], self.x_extent[1])

    @property
    def padded_shape(self) -> Shape:
        h = self.halo_width
        z, y, x = self.local_shape
        return (z, y + 2 * h, x + 2 * h)

    @property
    def local_points(self) -> int:
        return math.prod(self.local_shape)

    def rank_at(self, iy: int, ix: int) -> int:
        return (iy % self.py) * self.px + (ix % self.px)

    @property
    def neighbours(self) -> Mapping[str, int]:
        return {
            "-y": self.rank_at(self.iy - 1, self.ix),
            "+y": self.rank_at(self.iy + 1, self.ix),
            "-x": self.rank_at(self.iy, self.ix - 1),
            "+x": self.rank_at(self.iy, self.ix + 1),
        }

    @property
    def row_peers(self) -> list[int]:
        """
        Ranks sharing this rank's Y extent, in X order
        """
        return [self.rank_at(self.iy, j) for j in range(self.px)]

    @property
    def column_peers(self) -> list[int]:
        """
        Ranks sharing this rank's X extent, in Y order
        """
        return [self.rank_at(j, self.ix) for j in range(self.py)]

    def for_rank(self, rank: int) -> PencilLayout:
        return attrs.evolve(self, rank=rank)

    def extents(self, orientation: protocols.Orientation, shape: Shape) -> tuple[Extent, ...]:
        """
        (start, size) along z, y and x of this rank's block of an array of the
        given global shape in the given orientation.
        """
        gz, gy, gx = shape
        if orientation is protocols.Orientation.Z:
            return (
                (0, gz),
                balanced_split(gy, self.py, self.iy),
                balanced_split(gx, self.px, self.ix),
            )
        elif orientation is protocols.Orientation.X:
            return (
                balanced_split(gz, self.px, self.ix),
                balanced_split(gy, self.py, self.iy),
                (0, gx),
            )
        else:
            return (
                balanced_split(gz, self.px, self.ix),
                (0, gy),
                balanced_split(gx, self.py, self.iy),
            )


def decompose(grid: GlobalGrid, workers: int, *, halo_width: int = 1) -> list[PencilLayout]:
    """
    Return the layout of every rank for this many workers
    """
    if workers < 1:
        raise errors.DecompositionError(message=f"Need at least one worker, got {workers}")

    for py, px in _candidate_grids(workers):
        if py <= grid.y_size and px <= grid.x_size:
            log.debug("Decomposed %s over a %dx%d worker grid", grid.shape, py, px)
            return [
                PencilLayout(grid=grid, py=py, px=px, rank=rank, halo_width=halo_width)
                for rank in range(workers)
            ]

    raise errors.DecompositionError(
        message=(
            f"No way to split a {grid.y_size}x{grid.x_size} plane over {workers} workers"
            " without leaving a worker empty"
        )
    )


@attrs.define
class Field3D:
    """
    A halo padded Z pencil of one scalar field.
    """

    layout: PencilLayout
    data: protocols.Array = attrs.field(eq=False)

    def __attrs_post_init__(self) -> None:
        if self.data.shape != self.layout.padded_shape:
            raise errors.DecompositionError(
                message=f"Field of shape {self.data.shape} does not match layout"
                f" shape {self.layout.padded_shape}"
            )

    @classmethod
    def zeros(
        cls, layout: PencilLayout, precision: protocols.Precision = protocols.Precision.DOUBLE
    ) -> Self:
        return cls(layout=layout, data=np.zeros(layout.padded_shape, dtype=precision.dtype))

    @classmethod
    def from_interior(cls, layout: PencilLayout, interior: protocols.Array) -> Self:
        field = cls.zeros(layout, protocols.Precision.from_dtype(interior.dtype))
        field.interior[...] = interior
        return field

    @classmethod
    def from_global(
        cls,
        layout: PencilLayout,
        values: protocols.Array,
        precision: protocols.Precision | None = None,
    ) -> Self:
        if precision is None:
            precision = protocols.Precision.from_dtype(values.dtype)
        if values.shape != layout.grid.shape:
            raise errors.DecompositionError(
                message=f"Global array of shape {values.shape} does not match grid"
                f" {layout.grid.shape}"
            )
        (y0, ny), (x0, nx) = layout.y_extent, layout.x_extent
        field = cls.zeros(layout, precision)
        field.interior[...] = values[:, y0 : y0 + ny, x0 : x0 + nx]
        return field

    @property
    def precision(self) -> protocols.Precision:
        return protocols.Precision.from_dtype(self.data.dtype)

    @property
    def halo_width(self) -> int:
        return self.layout.halo_width

    @property
    def interior(self) -> protocols.Array:
        h = self.layout.halo_width
        _, ny, nx = self.layout.local_shape
        return self.data[:, h : h + ny, h : h + nx]

    def copy(self) -> Field3D:
        return Field3D(layout=self.layout, data=self.data.copy())

    def astype(self, precision: protocols.Precision) -> Field3D:
        return Field3D(layout=self.layout, data=self.data.astype(precision.dtype))

    def as_pencil(self) -> Pencil:
        return Pencil(
            layout=self.layout,
            orientation=protocols.Orientation.Z,
            global_shape=self.layout.grid.shape,
            data=np.ascontiguousarray(self.interior),
        )


@attrs.frozen
class Pencil:
    """
    A rank's block of a global array in one orientation, without halos.
    """

    layout: PencilLayout
    orientation: protocols.Orientation
    global_shape: Shape
    data: protocols.Array = attrs.field(eq=False)

    def to_field(self) -> Field3D:
        if self.orientation is not protocols.Orientation.Z:
            raise errors.DecompositionError(
                message=f"Only Z pencils have halos, this is a {self.orientation.value} pencil"
            )
        return Field3D.from_interior(self.layout, self.data)


def _exchange_error(
    error: errors.CommunicationError, direction: str, rank: int
) -> errors.CommunicationError:
    return errors.CommunicationError(
        message=f"Halo exchange towards {direction} failed: {error.message}",
        rank=rank,
        direction=direction,
    )


def halo_exchange(field: Field3D, transport: protocols.Transport) -> Field3D:
    """
    Fill every halo cell with the periodic neighbour's adjacent interior.

    Y halos are exchanged first for interior X only, then X halos for the
    whole padded Y range, which carries the Y halos into the corners.
    """
    layout = field.layout
    h = layout.halo_width
    _, ny, nx = layout.local_shape
    data = field.data
    neighbours = layout.neighbours

    phases: list[tuple[str, str, int, int, Any, Any, Any, Any]] = [
        (
            "+y",
            "-y",
            protocols.Tag.HALO_Y_UP,
            protocols.Tag.HALO_Y_DOWN,
            (slice(None), slice(ny, ny + h), slice(h, h + nx)),
            (slice(None), slice(h, 2 * h), slice(h, h + nx)),
            (slice(None), slice(0, h), slice(h, h + nx)),
            (slice(None), slice(ny + h, ny + 2 * h), slice(h, h + nx)),
        ),
        (
            "+x",
            "-x",
            protocols.Tag.HALO_X_UP,
            protocols.Tag.HALO_X_DOWN,
            (slice(None), slice(None), slice(nx, nx + h)),
            (slice(None), slice(None), slice(h, 2 * h)),
            (slice(None), slice(None), slice(0, h)),
            (slice(None), slice(None), slice(nx + h, nx + 2 * h)),
        ),
    ]

    for up, down, up_tag, down_tag, send_up, send_down, fill_low, fill_high in phases:
        try:
            transport.send(neighbours[up], up_tag, data[send_up])
        except errors.CommunicationError as error:
            raise _exchange_error(error, up, neighbours[up]) from error
        try:
            transport.send(neighbours[down], down_tag, data[send_down])
        except errors.CommunicationError as error:
            raise _exchange_error(error, down, neighbours[down]) from error

        try:
            data[fill_low] = transport.recv(neighbours[down], up_tag)
        except errors.CommunicationError as error:
            raise _exchange_error(error, down, neighbours[down]) from error
        try:
            data[fill_high] = transport.recv(neighbours[up], down_tag)
        except errors.CommunicationError as error:
            raise _exchange_error(error, up, neighbours[up]) from error

    return field


def global_reduce(
    values: protocols.Array | list[float],
    op: protocols.ReductionOp,
    transport: protocols.Transport,
) -> protocols.Array:
    """
    Element wise reduction across all ranks with the same result everywhere
    """
    return transport.allreduce(np.asarray(values), op.combine)


def _transpose_within(
    pencil: Pencil,
    target: protocols.Orientation,
    transport: protocols.Transport,
    *,
    send_axis: int,
    gather_axis: int,
    peers: list[int],
) -> Pencil:
    parts = len(peers)
    chunks: dict[int, protocols.Array] = {}
    for index, peer in enumerate(peers):
        start, size = balanced_split(pencil.global_shape[send_axis], parts, index)
        selection: list[slice] = [slice(None)] * 3
        selection[send_axis] = slice(start, start + size)
        chunks[peer] = np.ascontiguousarray(pencil.data[tuple(selection)])

    received = transport.alltoall(peers, chunks)
    data = np.concatenate([received[peer] for peer in peers], axis=gather_axis)
    return Pencil(
        layout=pencil.layout, orientation=target, global_shape=pencil.global_shape, data=data
    )


def pencil_transpose(
    pencil: Pencil | Field3D, target: protocols.Orientation, transport: protocols.Transport
) -> Pencil:
    """
    Redistribute so this rank holds complete lines along the target axis.

    Z and X pencils swap within a row of workers, X and Y pencils within a
    column. Z and Y go through X.
    """
    if isinstance(pencil, Field3D):
        pencil = pencil.as_pencil()

    Z, Y, X = protocols.Orientation.Z, protocols.Orientation.Y, protocols.Orientation.X
    source = pencil.orientation
    layout = pencil.layout

    if source is target:
        return attrs.evolve(pencil, data=pencil.data.copy())

    if source is Z and target is X:
        return _transpose_within(
            pencil, X, transport, send_axis=0, gather_axis=2, peers=layout.row_peers
        )
    elif source is X and target is Z:
        return _transpose_within(
            pencil, Z, transport, send_axis=2, gather_axis=0, peers=layout.row_peers
        )
    elif source is X and target is Y:
        return _transpose_within(
            pencil, Y, transport, send_axis=2, gather_axis=1, peers=layout.column_peers
        )
    elif source is Y and target is X:
        return _transpose_within(
            pencil, X, transport, send_axis=1, gather_axis=2, peers=layout.column_peers
        )
    else:
        return pencil_transpose(pencil_transpose(pencil, X, transport), target, transport)


def gather_to_root(
    field: Field3D | Pencil, transport: protocols.Transport, *, root: int = 0
) -> protocols.Array | None:
    """
    Assemble the global array on root. Every other rank gets None.
    """
    pencil = field.as_pencil() if isinstance(field, Field3D) else field
    layout = pencil.layout

    if transport.rank != root:
        transport.send(root, protocols.Tag.GATHER, pencil.data)
        return None

    result = np.empty(pencil.global_shape, dtype=pencil.data.dtype)
    for rank in range(transport.size):
        if rank == root:
            block = pencil.data
        else:
            block = transport.recv(rank, protocols.Tag.GATHER)
        extents = layout.for_rank(rank).extents(pencil.orientation, pencil.global_shape)
        result[tuple(slice(start, start + size) for start, size in extents)] = block
    return result


def gather_global(
    field: Field3D | Pencil, transport: protocols.Transport, *, root: int = 0
) -> protocols.Array:
    """
    Assemble the global array on root and hand a copy to every rank
    """
    result = gather_to_root(field, transport, root=root)
    if result is None:
        return transport.recv(root, protocols.Tag.GATHER)

    for rank in range(transport.size):
        if rank != root:
            transport.send(rank, protocols.Tag.GATHER, result)
    return result


def scatter_global(
    values: protocols.Array,
    layout: PencilLayout,
    precision: protocols.Precision | None = None,
) -> Field3D:
    """
    Every rank already holds the global array, so scattering only slices
    """
    return Field3D.from_global(layout, values, precision)
