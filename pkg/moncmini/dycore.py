"""
A small stand in for the model dynamics.

Variables are staggered on a C grid: theta and p live at cell centres and
u, v and w on the +x, +y and +z faces of each cell. The divergence is taken
face to centre and the gradient centre to face, so applying one after the
other gives exactly the 7 point Laplacian the pressure solvers invert.

The vertical velocity on the top face is always zero and the one below the
bottom cell is implied to be zero.
"""

from __future__ import annotations

import logging
from typing import Self

import attrs
import numpy as np

from . import errors, protocols
from .decomp import Field3D, global_reduce, halo_exchange
from .options import OptionsDatabase
from .state import ModelState
from .stencil import StencilOperator

log = logging.getLogger(__name__)

PROGNOSTIC_FIELDS = ("u", "v", "w", "theta")
ALL_FIELDS = (*PROGNOSTIC_FIELDS, "p", "rhs")

DEFAULT_BUOYANCY = 9.81 / 300.0


def _window(padded: protocols.Array, h: int, *, dy: int = 0, dx: int = 0) -> protocols.Array:
    """
    The interior of a padded array shifted by dy and dx cells
    """
    _, py, px = padded.shape
    ny, nx = py - 2 * h, px - 2 * h
    return padded[:, h + dy : h + dy + ny, h + dx : h + dx + nx]


def _level_below(values: protocols.Array, *, bottom: float | None = None) -> protocols.Array:
    """
    values[k - 1] at every level, with the bottom filled from ``bottom`` or
    by repeating the lowest level.
    """
    result = np.empty_like(values)
    result[1:] = values[:-1]
    result[0] = values[0] if bottom is None else bottom
    return result


def _level_above(values: protocols.Array) -> protocols.Array:
    result = np.empty_like(values)
    result[:-1] = values[1:]
    result[-1] = values[-1]
    return result


@attrs.frozen
class DynamicsSettings:
    viscosity: float = 0.0
    buoyancy_coefficient: float = DEFAULT_BUOYANCY
    geostrophic_relaxation_time: float = 0.0
    ug: float = 0.0
    vg: float = 0.0

    @classmethod
    def from_options(cls, options: OptionsDatabase) -> Self:
        return cls(
            viscosity=options.get_real("viscosity", 0.0),
            buoyancy_coefficient=options.get_real("buoyancy_coefficient", DEFAULT_BUOYANCY),
            geostrophic_relaxation_time=options.get_real("geostrophic_relaxation_time", 0.0),
            ug=options.get_real("ug", 0.0),
            vg=options.get_real("vg", 0.0),
        )


def perturbation_levels(z_size: int) -> int:
    return max(1, z_size // 4)


def theta_noise(
    layout_rows: range,
    x_extent: tuple[int, int],
    *,
    level: int,
    y_size: int,
    x_size: int,
    seed: int,
    amplitude: float,
) -> protocols.Array:
    """
    Noise for one level of this rank's rectangle.

    Each global row of a level has its own counter based generator so the
    values at a cell do not depend on how the grid is split.
    """
    x0, nx = x_extent
    rows = []
    for y in layout_rows:
        key = np.array([seed, level * y_size + y], dtype=np.uint64)
        generator = np.random.Generator(np.random.Philox(key=key))
        rows.append(generator.uniform(-amplitude, amplitude, x_size)[x0 : x0 + nx])
    return np.array(rows, dtype=np.float64).reshape(len(layout_rows), nx)


def init_dry_boundary_layer(state: ModelState) -> ModelState:
    """
    A constant geostrophic wind over a theta field that is perturbed with
    seeded noise in the lowest quarter of the column.
    """
    options = state.options
    ug = options.get_real("ug")
    vg = options.get_real("vg")
    amplitude = options.get_real("theta_perturbation_amplitude")
    seed = options.get_int("seed")
    if seed < 0:
        raise errors.ConfigurationError(
            message=f"seed must not be negative, got {seed}", key="seed"
        )
    if amplitude < 0:
        raise errors.ConfigurationError(
            message=f"theta_perturbation_amplitude must not be negative, got {amplitude}",
            key="theta_perturbation_amplitude",
        )

    if state.restarted:
        log.info("Keeping restored fields", extra=dict(state.logging_context))
        return state

    layout = state.layout
    grid = layout.grid
    for name in ALL_FIELDS:
        state.fields[name] = Field3D.zeros(layout)

    state.fields["u"].data[...] = ug
    state.fields["v"].data[...] = vg

    if amplitude > 0:
        y0, ny = layout.y_extent
        theta = state.fields["theta"].interior
        for level in range(min(perturbation_levels(grid.z_size), grid.z_size)):
            theta[level] = theta_noise(
                range(y0, y0 + ny),
                layout.x_extent,
                level=level,
                y_size=grid.y_size,
                x_size=grid.x_size,
                seed=seed,
                amplitude=amplitude,
            )

    log.info(
        "Initialised dry boundary layer ug=%s vg=%s amplitude=%s",
        ug,
        vg,
        amplitude,
        extra=dict(state.logging_context),
    )
    return state


def courant_number(state: ModelState) -> float:
    grid = state.layout.grid
    local = [
        float(np.max(np.abs(state.field(name).interior), initial=0.0)) * state.dtm / spacing
        for name, spacing in (("u", grid.dx), ("v", grid.dy), ("w", grid.dz))
    ]
    (largest,) = global_reduce(
        np.array([max(local)]), protocols.ReductionOp.MAX, state.transport
    )
    return float(largest)


def _upwind_advection(
    padded: protocols.Array,
    h: int,
    velocities: tuple[protocols.Array, protocols.Array, protocols.Array],
    spacing: tuple[float, float, float],
) -> protocols.Array:
    """
    -(velocity . grad) of a padded field using first order upwind differences
    """
    wc, vc, uc = velocities
    dz, dy, dx = spacing
    centre = _window(padded, h)

    from_west = (centre - _window(padded, h, dx=-1)) / dx
    from_east = (_window(padded, h, dx=1) - centre) / dx
    from_south = (centre - _window(padded, h, dy=-1)) / dy
    from_north = (_window(padded, h, dy=1) - centre) / dy
    from_below = (centre - _level_below(centre)) / dz
    from_above = (_level_above(centre) - centre) / dz

    tendency = -np.where(uc > 0, uc * from_west, uc * from_east)
    tendency -= np.where(vc > 0, vc * from_south, vc * from_north)
    tendency -= np.where(wc > 0, wc * from_below, wc * from_above)
    return tendency


def timestep_dynamics(state: ModelState) -> ModelState:
    """
    Advance u, v, w and theta one explicit Euler step with upwind advection,
    constant coefficient diffusion, buoyancy on w and optional relaxation
    towards the geostrophic wind. The result is not yet divergence free.
    """
    settings = DynamicsSettings.from_options(state.options)
    grid = state.layout.grid
    transport = state.transport
    dtm = state.dtm

    fields = {name: state.field(name) for name in PROGNOSTIC_FIELDS}
    for field in fields.values():
        halo_exchange(field, transport)

    courant = courant_number(state)
    if courant > 1.0:
        raise errors.StabilityError(
            message=f"Courant number {courant} exceeds 1, reduce dtm", courant=courant
        )

    h = state.layout.halo_width
    u, v, w = (fields[name].data for name in ("u", "v", "w"))
    uc = 0.5 * (_window(u, h) + _window(u, h, dx=-1))
    vc = 0.5 * (_window(v, h) + _window(v, h, dy=-1))
    w_interior = _window(w, h)
    wc = 0.5 * (w_interior + _level_below(w_interior, bottom=0.0))

    spacing = (grid.dz, grid.dy, grid.dx)
    operator = StencilOperator(grid)
    tendencies: dict[str, protocols.Array] = {}
    for name, field in fields.items():
        tendency = _upwind_advection(field.data, h, (wc, vc, uc), spacing)
        if settings.viscosity:
            tendency += settings.viscosity * operator.apply_padded(field.data, h)
        tendencies[name] = tendency

    theta = fields["theta"].interior
    if grid.z_size > 1:
        tendencies["w"][:-1] += settings.buoyancy_coefficient * 0.5 * (theta[:-1] + theta[1:])

    if settings.geostrophic_relaxation_time > 0:
        tau = settings.geostrophic_relaxation_time
        tendencies["u"] += (settings.ug - fields["u"].interior) / tau
        tendencies["v"] += (settings.vg - fields["v"].interior) / tau

    for name, field in fields.items():
        field.interior[...] += dtm * tendencies[name]
    fields["w"].interior[-1] = 0.0

    log.debug("Dynamics done with courant number %.3f", courant, extra=dict(state.logging_context))
    return state


def compute_divergence(
    u: Field3D, v: Field3D, w: Field3D, dtm: float, transport: protocols.Transport
) -> Field3D:
    """
    Face to centre divergence divided by dtm, shifted to a global mean of zero
    """
    layout = u.layout
    grid = layout.grid
    h = layout.halo_width
    halo_exchange(u, transport)
    halo_exchange(v, transport)

    faces = w.interior.astype(np.float64)
    faces[-1] = 0.0
    divergence = (_window(u.data, h) - _window(u.data, h, dx=-1)) / grid.dx
    divergence = divergence + (_window(v.data, h) - _window(v.data, h, dy=-1)) / grid.dy
    divergence = divergence + (faces - _level_below(faces, bottom=0.0)) / grid.dz
    rhs = divergence / dtm

    (total,) = global_reduce(
        np.array([rhs.sum(dtype=np.float64)]), protocols.ReductionOp.SUM, transport
    )
    rhs -= total / grid.points
    return Field3D.from_interior(layout, rhs.astype(u.data.dtype))


def divergence_norm(state: ModelState) -> float:
    """
    Largest absolute face to centre divergence over all ranks
    """
    rhs = compute_divergence(
        state.field("u"), state.field("v"), state.field("w"), 1.0, state.transport
    )
    (largest,) = global_reduce(
        np.array([float(np.max(np.abs(rhs.interior), initial=0.0))]),
        protocols.ReductionOp.MAX,
        state.transport,
    )
    return float(largest)


def pressure_source(state: ModelState) -> ModelState:
    state.fields["rhs"] = compute_divergence(
        state.field("u"), state.field("v"), state.field("w"), state.dtm, state.transport
    )
    return state


def project_velocities(state: ModelState) -> ModelState:
    """
    Subtract dtm times the centre to face gradient of p from the velocities
    """
    grid = state.layout.grid
    h = state.layout.halo_width
    p = halo_exchange(state.field("p"), state.transport).data
    dtm = state.dtm

    centre = _window(p, h)
    state.field("u").interior[...] -= dtm * (_window(p, h, dx=1) - centre) / grid.dx
    state.field("v").interior[...] -= dtm * (_window(p, h, dy=1) - centre) / grid.dy

    w = state.field("w").interior
    w[:-1] -= dtm * (centre[1:] - centre[:-1]) / grid.dz
    w[-1] = 0.0
    return state


def pressure_projection(state: ModelState, solver: protocols.PressureSolver) -> ModelState:
    """
    Make the velocities divergence free with the given solver
    """
    pressure_source(state)
    state.fields["p"] = solver.solve(state.field("rhs"), state.transport)
    return project_velocities(state)
