"""
ILU(0) preconditioned BiCGStab for the pressure.

The preconditioner is block Jacobi: each rank factors its own piece of the
operator with the couplings to other ranks dropped, so applying it needs no
communication. The operator itself always includes those couplings through
the halo.
"""

from __future__ import annotations

import logging
import math
from typing import TYPE_CHECKING, Any, cast

import attrs
import numpy as np
import scipy.sparse
import scipy.sparse.linalg

from . import errors, protocols
from .decomp import Field3D, PencilLayout, global_reduce
from .stencil import SolverConfig, StencilOperator, flatten, unflatten

log = logging.getLogger(__name__)

BREAKDOWN_THRESHOLD = 1e-30


def _triangular_solver(matrix: scipy.sparse.spmatrix) -> Any:
    return scipy.sparse.linalg.splu(
        scipy.sparse.csc_matrix(matrix),
        permc_spec="NATURAL",
        diag_pivot_thresh=0.0,
    )


@attrs.frozen
class Ilu0Factors:
    """
    Unit lower L and upper U sharing the sparsity of the local operator
    """

    lower: scipy.sparse.csr_matrix = attrs.field(eq=False)
    upper: scipy.sparse.csr_matrix = attrs.field(eq=False)
    shape: tuple[int, int, int]
    precision: protocols.Precision = protocols.Precision.DOUBLE
    _lower_solver: Any = attrs.field(init=False, eq=False, repr=False)
    _upper_solver: Any = attrs.field(init=False, eq=False, repr=False)

    def __attrs_post_init__(self) -> None:
        object.__setattr__(self, "_lower_solver", _triangular_solver(self.lower))
        object.__setattr__(self, "_upper_solver", _triangular_solver(self.upper))

    def solve(self, residual: protocols.Array) -> protocols.Array:
        """
        Return (LU)^-1 applied to a (z, y, x) block
        """
        dtype = self.precision.dtype
        vector = flatten(residual).astype(dtype)
        vector = self._upper_solver.solve(self._lower_solver.solve(vector))
        return unflatten(vector.astype(dtype, copy=False), self.shape)


def ilu0_factor(
    op: StencilOperator,
    layout: PencilLayout,
    precision: protocols.Precision = protocols.Precision.DOUBLE,
) -> Ilu0Factors:
    """
    Gaussian elimination that only updates entries already present in the
    local operator.
    """
    matrix = op.local_matrix(layout)
    n = matrix.shape[0]
    indptr = matrix.indptr.tolist()
    indices = matrix.indices.tolist()
    data = matrix.data.astype(np.float64).tolist()

    positions = [
        {indices[p]: p for p in range(indptr[row], indptr[row + 1])} for row in range(n)
    ]
    diagonal = [positions[row].get(row, -1) for row in range(n)]
    for row, where in enumerate(diagonal):
        if where < 0:
            raise errors.FactorisationError(message=f"Cell {row} has no diagonal", cell=row)

    for row in range(n):
        row_positions = positions[row]
        for p in range(indptr[row], indptr[row + 1]):
            k = indices[p]
            if k >= row:
                break
            pivot = data[diagonal[k]]
            if pivot == 0.0:
                raise errors.FactorisationError(message=f"Zero pivot at cell {k}", cell=k)
            data[p] /= pivot
            multiplier = data[p]
            for q in range(diagonal[k] + 1, indptr[k + 1]):
                target = row_positions.get(indices[q])
                if target is not None:
                    data[target] -= multiplier * data[q]

        if data[diagonal[row]] == 0.0:
            raise errors.FactorisationError(message=f"Zero pivot at cell {row}", cell=row)

    factored = scipy.sparse.csr_matrix(
        (np.asarray(data), matrix.indices.copy(), matrix.indptr.copy()), shape=matrix.shape
    )
    identity = scipy.sparse.identity(n, format="csr")
    lower = (scipy.sparse.tril(factored, k=-1, format="csr") + identity).astype(precision.dtype)
    upper = scipy.sparse.triu(factored, format="csr").astype(precision.dtype)
    return Ilu0Factors(
        lower=lower.tocsr(), upper=upper.tocsr(), shape=layout.local_shape, precision=precision
    )


@attrs.frozen
class KrylovSolution:
    pressure: Field3D
    iterations: int
    final_residual: float
    residual_history: tuple[float, ...] = ()


class _Workspace:
    """
    Operator application and reductions on bare (z, y, x) blocks
    """

    def __init__(
        self, layout: PencilLayout, precision: protocols.Precision, transport: protocols.Transport
    ) -> None:
        self.op = StencilOperator(layout.grid)
        self.scratch = Field3D.zeros(layout, precision)
        self.transport = transport
        self.dtype = precision.dtype

    def apply(self, block: protocols.Array) -> protocols.Array:
        self.scratch.interior[...] = block
        return self.op.apply(self.scratch, self.transport).interior.copy()

    def dots(self, *pairs: tuple[protocols.Array, protocols.Array]) -> protocols.Array:
        local = np.array([np.vdot(a, b) for a, b in pairs], dtype=self.dtype)
        return global_reduce(local, protocols.ReductionOp.SUM, self.transport)

    def mean(self, block: protocols.Array, points: int) -> Any:
        total = global_reduce(
            np.array([block.sum(dtype=np.float64)]), protocols.ReductionOp.SUM, self.transport
        )
        return self.dtype.type(total[0] / points)


def bicgstab_solve(
    rhs: Field3D,
    config: SolverConfig,
    transport: protocols.Transport,
    factors: Ilu0Factors | None = None,
) -> KrylovSolution:
    """
    Solve A p = rhs from a zero initial guess until the relative residual
    2-norm is within the tolerance.

    Every iteration performs four global reductions: one for rho, one for
    the alpha denominator, one carrying both omega products and one for the
    residual norm. Each recursive convergence is confirmed against the true
    residual after the solution is moved to mean zero, and iteration carries
    on from the true residual when it is not yet small enough.
    """
    layout = rhs.layout
    work = _Workspace(layout, config.precision, transport)
    dtype = work.dtype

    if factors is None and config.preconditioner == "ilu0":
        factors = ilu0_factor(work.op, layout, config.precision)

    def precondition(block: protocols.Array) -> protocols.Array:
        if factors is None:
            return block.copy()
        return factors.solve(block)

    b = rhs.interior.astype(dtype)
    (b_norm_squared,) = work.dots((b, b))
    b_norm = math.sqrt(float(b_norm_squared))

    x = np.zeros_like(b)
    if b_norm == 0.0:
        return KrylovSolution(
            pressure=Field3D.from_interior(layout, x.astype(rhs.data.dtype)),
            iterations=0,
            final_residual=0.0,
        )

    tolerance = config.tolerance * b_norm
    r = b.copy()
    r_hat = r.copy()
    p = np.zeros_like(b)
    v = np.zeros_like(b)
    rho_previous = alpha = omega = dtype.type(1.0)
    restart = True
    history = [1.0]

    iteration = 0
    while iteration < config.max_iterations:
        (rho,) = work.dots((r_hat, r))
        if abs(float(rho)) < BREAKDOWN_THRESHOLD * b_norm**2:
            raise errors.Breakdown(message="rho vanished", iteration=iteration)

        if restart:
            p = r.copy()
            restart = False
        else:
            beta = (rho / rho_previous) * (alpha / omega)
            p = r + beta * (p - omega * v)

        p_hat = precondition(p)
        v = work.apply(p_hat)
        (r_hat_v,) = work.dots((r_hat, v))
        alpha = rho / r_hat_v

        s = r - alpha * v
        s_hat = precondition(s)
        t = work.apply(s_hat)
        t_s, t_t = work.dots((t, s), (t, t))
        omega = t_s / t_t if t_t != 0 else dtype.type(0.0)

        x = x + alpha * p_hat + omega * s_hat
        r = s - omega * t
        (r_norm_squared,) = work.dots((r, r))
        r_norm = math.sqrt(float(r_norm_squared))

        iteration += 1
        history.append(r_norm / b_norm)

        if r_norm <= tolerance:
            x = x - work.mean(x, layout.grid.points)
            r = b - work.apply(x)
            (true_squared,) = work.dots((r, r))
            true_norm = math.sqrt(float(true_squared))
            history[-1] = true_norm / b_norm
            if true_norm <= tolerance:
                log.debug("Krylov solve converged in %d iterations", iteration)
                return KrylovSolution(
                    pressure=Field3D.from_interior(layout, x.astype(rhs.data.dtype)),
                    iterations=iteration,
                    final_residual=true_norm / b_norm,
                    residual_history=tuple(history),
                )
            r_hat = r.copy()
            restart = True
            continue

        if abs(float(omega)) < BREAKDOWN_THRESHOLD:
            raise errors.Breakdown(message="omega vanished", iteration=iteration)
        rho_previous = rho

    raise errors.NonConvergence(
        message=f"No convergence after {config.max_iterations} iterations",
        residual_history=tuple(history),
    )


@attrs.define
class IterativeSolver:
    """
    The Krylov pressure solver with its factors kept between solves
    """

    config: SolverConfig
    factors: Ilu0Factors | None = None
    name: str = "iterativesolver"
    iterations: list[int] = attrs.field(factory=list)

    def prepare(self, layout: PencilLayout) -> None:
        if self.config.preconditioner == "ilu0":
            self.factors = ilu0_factor(StencilOperator(layout.grid), layout, self.config.precision)

    def solve(self, rhs: Field3D, transport: protocols.Transport, /) -> Field3D:
        if self.factors is None and self.config.preconditioner == "ilu0":
            self.prepare(rhs.layout)
        solution = bicgstab_solve(rhs, self.config, transport, self.factors)
        self.iterations.append(solution.iterations)
        return solution.pressure


if TYPE_CHECKING:
    _IS: protocols.P_PressureSolver = cast(IterativeSolver, None)
