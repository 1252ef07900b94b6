"""
The 7 point Laplacian shared by both pressure solvers.

Horizontally the operator is periodic and reaches neighbouring ranks through
the halo. Vertically the columns are closed with zero gradient at the bottom
and top, so the boundary rows simply leave out the missing neighbour.
"""

from __future__ import annotations

from typing import Literal, Self, cast

import attrs
import numpy as np
import scipy.sparse

from . import errors, protocols
from .decomp import Field3D, GlobalGrid, PencilLayout, halo_exchange
from .options import OptionsDatabase


def _positive(instance: object, attribute: attrs.Attribute[float], value: float) -> None:
    if not value > 0:
        raise errors.ConfigurationError(
            message=f"{attribute.name} must be greater than zero, got {value}",
            key=f"solver_{attribute.name}",
        )


def _at_least_one(instance: object, attribute: attrs.Attribute[int], value: int) -> None:
    if value < 1:
        raise errors.ConfigurationError(
            message=f"{attribute.name} must be at least 1, got {value}",
            key=f"solver_{attribute.name}",
        )


@attrs.frozen
class SolverConfig:
    tolerance: float = attrs.field(default=1e-4, validator=_positive)
    max_iterations: int = attrs.field(default=1000, validator=_at_least_one)
    precision: protocols.Precision = protocols.Precision.DOUBLE
    preconditioner: Literal["ilu0", "none"] = attrs.field(default="ilu0")

    @preconditioner.validator
    def _validate_preconditioner(self, attribute: object, value: str) -> None:
        if value not in ("ilu0", "none"):
            raise errors.ConfigurationError(
                message=f"Unknown preconditioner {value!r}", key="solver_preconditioner"
            )

    @classmethod
    def from_options(cls, options: OptionsDatabase) -> Self:
        precision = options.get_str("solver_precision", "double")
        try:
            parsed = protocols.Precision(precision)
        except ValueError as error:
            raise errors.ConfigurationError(
                message=f"solver_precision must be single or double, got {precision!r}",
                key="solver_precision",
            ) from error

        return cls(
            tolerance=options.get_real("solver_tolerance", 1e-4),
            max_iterations=options.get_int("solver_max_iterations", 1000),
            precision=parsed,
            preconditioner=cast(
                Literal["ilu0", "none"], options.get_str("solver_preconditioner", "ilu0")
            ),
        )


@attrs.frozen
class StencilOperator:
    grid: GlobalGrid

    @property
    def cz(self) -> float:
        return 1.0 / self.grid.dz**2

    @property
    def cy(self) -> float:
        return 1.0 / self.grid.dy**2

    @property
    def cx(self) -> float:
        return 1.0 / self.grid.dx**2

    def apply_padded(self, padded: protocols.Array, halo_width: int) -> protocols.Array:
        """
        Apply to the interior of a padded array whose halos are already fresh.

        Written as a sum of neighbour differences so a constant gives exactly 0.
        """
        h = halo_width
        _, py, px = padded.shape
        ny, nx = py - 2 * h, px - 2 * h
        dtype = padded.dtype
        cz, cy, cx = (dtype.type(c) for c in (self.cz, self.cy, self.cx))

        centre = padded[:, h : h + ny, h : h + nx]
        result = cx * (
            (padded[:, h : h + ny, h + 1 : h + nx + 1] - centre)
            + (padded[:, h : h + ny, h - 1 : h + nx - 1] - centre)
        )
        result += cy * (
            (padded[:, h + 1 : h + ny + 1, h : h + nx] - centre)
            + (padded[:, h - 1 : h + ny - 1, h : h + nx] - centre)
        )

        vertical = cz * (centre[1:] - centre[:-1])
        result[:-1] += vertical
        result[1:] -= vertical
        return result

    def apply(self, x: Field3D, transport: protocols.Transport) -> Field3D:
        halo_exchange(x, transport)
        return Field3D.from_interior(x.layout, self.apply_padded(x.data, x.halo_width))

    def local_matrix(
        self,
        layout: PencilLayout,
        precision: protocols.Precision = protocols.Precision.DOUBLE,
    ) -> scipy.sparse.csr_matrix:
        """
        The operator restricted to this rank's cells, z fastest.

        Couplings that leave the rank's rectangle are dropped while the
        diagonal keeps its full weight.
        """
        nz, ny, nx = layout.local_shape
        n = nz * ny * nx
        index = np.arange(n).reshape((nz, ny, nx), order="F")

        diagonal = np.full((nz, ny, nx), -2.0 * (self.cx + self.cy))
        if nz > 1:
            diagonal[0] -= self.cz
            diagonal[-1] -= self.cz
            diagonal[1:-1] -= 2.0 * self.cz

        rows = [index.ravel()]
        cols = [index.ravel()]
        values = [diagonal.ravel()]

        def couple(a: protocols.Array, b: protocols.Array, weight: float) -> None:
            rows.extend((a.ravel(), b.ravel()))
            cols.extend((b.ravel(), a.ravel()))
            values.extend((np.full(a.size, weight), np.full(a.size, weight)))

        couple(index[1:], index[:-1], self.cz)
        couple(index[:, 1:], index[:, :-1], self.cy)
        couple(index[:, :, 1:], index[:, :, :-1], self.cx)

        matrix = scipy.sparse.coo_matrix(
            (np.concatenate(values), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n)
        ).tocsr()
        matrix.sum_duplicates()
        matrix.sort_indices()
        return matrix.astype(precision.dtype)


def apply_operator(x: Field3D, transport: protocols.Transport) -> Field3D:
    return StencilOperator(x.layout.grid).apply(x, transport)


def flatten(interior: protocols.Array) -> protocols.Array:
    """
    Lay out a (z, y, x) block z fastest, the order of ``local_matrix``
    """
    return interior.ravel(order="F")


def unflatten(vector: protocols.Array, shape: tuple[int, int, int]) -> protocols.Array:
    return vector.reshape(shape, order="F")
