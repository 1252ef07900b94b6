"""
The spectral pressure solver.

The right hand side is transformed along X (real to complex) and Y (complex
to complex). Every horizontal wavenumber then leaves an independent tridiagonal
system in the vertical, which is solved column by column before transforming
back.

The horizontal eigenvalues used are those of the discrete second difference,
so this solver and the Krylov solver solve exactly the same discrete system.
"""

from __future__ import annotations

import logging
from typing import TYPE_CHECKING, Self, cast

import attrs
import numpy as np
import scipy.fft

from . import errors, protocols
from .decomp import Field3D, GlobalGrid, Pencil, global_reduce, pencil_transpose
from .options import OptionsDatabase
from .stencil import SolverConfig

log = logging.getLogger(__name__)

# Allowed size of the right hand side mean relative to its largest value before
# the problem is considered incompatible with the boundary conditions
MEAN_TOLERANCE = {
    protocols.Precision.DOUBLE: 1e-10,
    protocols.Precision.SINGLE: 1e-5,
}


def _complex_for(dtype: np.dtype[object]) -> np.dtype[object]:
    if np.dtype(dtype) in (np.dtype(np.float32), np.dtype(np.complex64)):
        return np.dtype(np.complex64)
    return np.dtype(np.complex128)


def _real_for(dtype: np.dtype[object]) -> np.dtype[object]:
    if np.dtype(dtype) in (np.dtype(np.float32), np.dtype(np.complex64)):
        return np.dtype(np.float32)
    return np.dtype(np.float64)


def check_transform_size(n: int, *, key: str) -> None:
    remaining = n
    for factor in (2, 3, 5):
        while remaining % factor == 0:
            remaining //= factor
    if remaining != 1:
        raise errors.ConfigurationError(
            message=f"{key}={n} is not a product of 2, 3 and 5", key=key
        )


def check_transform_sizes(grid: GlobalGrid) -> None:
    check_transform_size(grid.y_size, key="y_size")
    check_transform_size(grid.x_size, key="x_size")


@attrs.frozen
class ScipyFFTPlan:
    n: int
    real: bool

    def forward(self, data: protocols.Array, axis: int, /) -> protocols.Array:
        if self.real:
            return cast(protocols.Array, scipy.fft.rfft(data, axis=axis))
        return cast(protocols.Array, scipy.fft.fft(data, axis=axis))

    def backward(self, data: protocols.Array, axis: int, /) -> protocols.Array:
        if self.real:
            return cast(protocols.Array, scipy.fft.irfft(data, n=self.n, axis=axis))
        return cast(protocols.Array, scipy.fft.ifft(data, axis=axis))


class ScipyFFTKernel:
    def plan(self, n: int, /, *, real: bool) -> ScipyFFTPlan:
        return ScipyFFTPlan(n=n, real=real)


@attrs.frozen
class NaiveDFTPlan:
    """
    Direct summation, used as a reference for the real kernel.
    """

    n: int
    real: bool

    def _matrix(self, sign: int) -> protocols.Array:
        k = np.arange(self.n)
        return np.exp(sign * 2j * np.pi * (np.outer(k, k) % self.n) / self.n)

    def forward(self, data: protocols.Array, axis: int, /) -> protocols.Array:
        moved = np.moveaxis(data, axis, -1).astype(np.complex128)
        result = moved @ self._matrix(-1)
        if self.real:
            result = result[..., : self.n // 2 + 1]
        return np.moveaxis(result, -1, axis).astype(_complex_for(data.dtype))

    def backward(self, data: protocols.Array, axis: int, /) -> protocols.Array:
        moved = np.moveaxis(data, axis, -1).astype(np.complex128)
        if self.real:
            kept = self.n // 2 + 1
            full = np.empty((*moved.shape[:-1], self.n), dtype=np.complex128)
            full[..., :kept] = moved
            full[..., kept:] = np.conj(moved[..., 1 : self.n - kept + 1][..., ::-1])
            moved = full

        result = (moved @ self._matrix(1)) / self.n
        if self.real:
            return np.moveaxis(result.real, -1, axis).astype(_real_for(data.dtype))
        return np.moveaxis(result, -1, axis).astype(_complex_for(data.dtype))


class NaiveDFTKernel:
    def plan(self, n: int, /, *, real: bool) -> NaiveDFTPlan:
        return NaiveDFTPlan(n=n, real=real)


def kernel_from_options(options: OptionsDatabase) -> protocols.TransformKernel:
    name = options.get_str("fft_kernel", "scipy")
    if name == "scipy":
        return ScipyFFTKernel()
    elif name == "naive":
        return NaiveDFTKernel()
    raise errors.ConfigurationError(message=f"Unknown fft_kernel {name!r}", key="fft_kernel")


def modified_wavenumber(n: int, spacing: float, count: int | None = None) -> protocols.Array:
    k = np.arange(n if count is None else count)
    return cast(protocols.Array, (2.0 - 2.0 * np.cos(2.0 * np.pi * k / n)) / spacing**2)


@attrs.frozen
class ModifiedWavenumbers:
    """
    Eigenvalues of the periodic second difference for each horizontal
    wavenumber, sign flipped so they are never negative.
    """

    lambda_y: protocols.Array = attrs.field(eq=False)
    lambda_x: protocols.Array = attrs.field(eq=False)

    @classmethod
    def for_grid(cls, grid: GlobalGrid) -> Self:
        lambda_y = modified_wavenumber(grid.y_size, grid.dy)
        lambda_x = modified_wavenumber(grid.x_size, grid.dx, grid.x_size // 2 + 1)
        lambda_y[0] = 0.0
        lambda_x[0] = 0.0
        return cls(lambda_y=lambda_y, lambda_x=lambda_x)


@attrs.frozen
class SpectralField:
    """
    Coefficients indexed (z, ky, kx) in whatever orientation they are held.
    """

    coefficients: Pencil
    wavenumbers: ModifiedWavenumbers
    real_shape: tuple[int, int, int]

    @property
    def precision(self) -> protocols.Precision:
        return protocols.Precision.from_dtype(self.coefficients.data.dtype)


def forward_transform(
    field: Field3D,
    transport: protocols.Transport,
    kernel: protocols.TransformKernel | None = None,
) -> SpectralField:
    if kernel is None:
        kernel = ScipyFFTKernel()

    grid = field.layout.grid
    gz, gy, gx = grid.shape
    X, Y, Z = protocols.Orientation.X, protocols.Orientation.Y, protocols.Orientation.Z

    pencil = pencil_transpose(field.as_pencil(), X, transport)
    pencil = Pencil(
        layout=pencil.layout,
        orientation=X,
        global_shape=(gz, gy, gx // 2 + 1),
        data=kernel.plan(gx, real=True).forward(pencil.data, 2),
    )

    pencil = pencil_transpose(pencil, Y, transport)
    pencil = attrs.evolve(pencil, data=kernel.plan(gy, real=False).forward(pencil.data, 1))

    return SpectralField(
        coefficients=pencil_transpose(pencil, Z, transport),
        wavenumbers=ModifiedWavenumbers.for_grid(grid),
        real_shape=grid.shape,
    )


def backward_transform(
    spec: SpectralField,
    transport: protocols.Transport,
    kernel: protocols.TransformKernel | None = None,
) -> Field3D:
    if kernel is None:
        kernel = ScipyFFTKernel()

    gz, gy, gx = spec.real_shape
    X, Y, Z = protocols.Orientation.X, protocols.Orientation.Y, protocols.Orientation.Z

    pencil = pencil_transpose(spec.coefficients, Y, transport)
    pencil = attrs.evolve(pencil, data=kernel.plan(gy, real=False).backward(pencil.data, 1))

    pencil = pencil_transpose(pencil, X, transport)
    pencil = Pencil(
        layout=pencil.layout,
        orientation=X,
        global_shape=spec.real_shape,
        data=kernel.plan(gx, real=True).backward(pencil.data, 2),
    )

    return pencil_transpose(pencil, Z, transport).to_field()


def thomas_columns(
    rhs: protocols.Array,
    eigenvalues: protocols.Array,
    dz: float,
    pinned: protocols.Array | None = None,
) -> protocols.Array:
    """
    Solve (D2z - eigenvalue) p = rhs for every column at once.

    rhs has z as its first axis; eigenvalues and pinned broadcast over the
    remaining axes. D2z is the second difference with zero gradient at both
    ends. Pinned columns replace their last equation with p = 0 and are then
    shifted to mean zero.
    """
    nz = rhs.shape[0]
    columns = rhs.shape[1:]
    real = _real_for(rhs.dtype)
    cz = real.type(1.0 / dz**2)

    lam = np.broadcast_to(np.asarray(eigenvalues, dtype=real), columns)
    diagonal = np.empty((nz, *columns), dtype=real)
    diagonal[...] = -lam
    if nz > 1:
        diagonal[0] -= cz
        diagonal[-1] -= cz
        diagonal[1:-1] -= 2 * cz

    lower = np.full((nz, *columns), cz, dtype=real)
    upper = np.full((nz, *columns), cz, dtype=real)
    lower[0] = 0
    upper[-1] = 0
    values = np.array(rhs, dtype=_complex_for(rhs.dtype), copy=True)

    mask = None
    if pinned is not None:
        mask = np.broadcast_to(np.asarray(pinned, dtype=bool), columns)
        diagonal[-1][mask] = 1
        lower[-1][mask] = 0
        values[-1][mask] = 0

    scaled_upper = np.empty_like(upper)
    scaled_rhs = np.empty_like(values)
    scaled_upper[0] = upper[0] / diagonal[0]
    scaled_rhs[0] = values[0] / diagonal[0]
    for k in range(1, nz):
        denominator = diagonal[k] - lower[k] * scaled_upper[k - 1]
        scaled_upper[k] = upper[k] / denominator
        scaled_rhs[k] = (values[k] - lower[k] * scaled_rhs[k - 1]) / denominator

    solution = np.empty_like(values)
    solution[-1] = scaled_rhs[-1]
    for k in range(nz - 2, -1, -1):
        solution[k] = scaled_rhs[k] - scaled_upper[k] * solution[k + 1]

    if mask is not None and mask.any():
        solution[:, mask] -= solution[:, mask].mean(axis=0)

    return solution


def vertical_ode_solve(
    spec_rhs: SpectralField, wavenumbers: ModifiedWavenumbers | None = None
) -> SpectralField:
    """
    Solve the vertical problem for every horizontal wavenumber this rank holds
    """
    pencil = spec_rhs.coefficients
    if pencil.orientation is not protocols.Orientation.Z:
        raise errors.DecompositionError(
            message="The vertical solve needs complete columns (a Z pencil)"
        )
    if wavenumbers is None:
        wavenumbers = spec_rhs.wavenumbers

    _, (ky0, ny), (kx0, nx) = pencil.layout.extents(pencil.orientation, pencil.global_shape)
    lam = (
        wavenumbers.lambda_y[ky0 : ky0 + ny, None] + wavenumbers.lambda_x[None, kx0 : kx0 + nx]
    )

    pinned = np.zeros((ny, nx), dtype=bool)
    if ky0 == 0 and kx0 == 0 and ny and nx:
        pinned[0, 0] = True

    solution = thomas_columns(pencil.data, lam, pencil.layout.grid.dz, pinned)
    with np.errstate(invalid="ignore"):
        finite = bool(np.isfinite(solution).all())
    if not finite:
        raise errors.NumericError(message="The vertical solve produced non finite values")

    return attrs.evolve(spec_rhs, coefficients=attrs.evolve(pencil, data=solution))


def solve_pressure_fft(
    rhs: Field3D,
    transport: protocols.Transport,
    config: SolverConfig,
    kernel: protocols.TransformKernel | None = None,
) -> Field3D:
    """
    Return p with A p = rhs and a global mean of zero
    """
    layout = rhs.layout
    check_transform_sizes(layout.grid)

    local = rhs.interior
    (total,) = global_reduce(
        np.array([local.sum(dtype=np.float64)]), protocols.ReductionOp.SUM, transport
    )
    (largest,) = global_reduce(
        np.array([np.max(np.abs(local), initial=0.0)], dtype=np.float64),
        protocols.ReductionOp.MAX,
        transport,
    )
    if largest == 0.0:
        return Field3D.zeros(layout, rhs.precision)

    mean = float(total) / layout.grid.points
    if abs(mean) > MEAN_TOLERANCE[rhs.precision] * float(largest):
        raise errors.SingularityError(
            message=f"The source has a mean of {mean}, the problem has no solution", mean=mean
        )

    spectral = forward_transform(rhs.astype(config.precision), transport, kernel)
    try:
        spectral = vertical_ode_solve(spectral)
        failed = 0.0
    except errors.NumericError:
        failed = 1.0

    (any_failed,) = global_reduce(np.array([failed]), protocols.ReductionOp.MAX, transport)
    if any_failed:
        raise errors.NumericError(message="The vertical solve produced non finite values")

    log.debug(
        "Solved for pressure on %s in %s precision", layout.grid.shape, config.precision.value
    )

    return backward_transform(spectral, transport, kernel).astype(rhs.precision)


@attrs.define
class FFTSolver:
    config: SolverConfig
    kernel: protocols.TransformKernel = attrs.field(factory=ScipyFFTKernel)
    name: str = "fftsolver"

    @classmethod
    def from_options(cls, options: OptionsDatabase) -> Self:
        return cls(config=SolverConfig.from_options(options), kernel=kernel_from_options(options))

    def prepare(self, grid: GlobalGrid) -> None:
        check_transform_sizes(grid)

    def solve(self, rhs: Field3D, transport: protocols.Transport, /) -> Field3D:
        return solve_pressure_fft(rhs, transport, self.config, self.kernel)


if TYPE_CHECKING:
    _SK: protocols.P_TransformKernel = cast(ScipyFFTKernel, None)
    _NK: protocols.P_TransformKernel = cast(NaiveDFTKernel, None)
    _FS: protocols.P_PressureSolver = cast(FFTSolver, None)
