"""
Reference implementations the tests compare the model against.

Nothing here shares code with the solvers: the Laplacian is assembled cell by
cell from its definition and solved densely.
"""

from collections.abc import Callable
from typing import Any, TypeVar

import numpy as np

from moncmini import decomp, launch, protocols

T = TypeVar("T")

RECV_TIMEOUT = 30.0


def grid(
    shape: tuple[int, int, int], spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
) -> decomp.GlobalGrid:
    (z, y, x), (dz, dy, dx) = shape, spacing
    return decomp.GlobalGrid(z_size=z, y_size=y, x_size=x, dz=dz, dy=dy, dx=dx)


def on_world(size: int, target: Callable[[protocols.Transport], T]) -> list[T]:
    return launch.run_world(size, target, recv_timeout=RECV_TIMEOUT)


def dense_laplacian(g: decomp.GlobalGrid) -> np.ndarray[Any, Any]:
    """
    Periodic in x and y, zero gradient at the bottom and top, row index
    ``(k * y_size + j) * x_size + i``
    """
    nz, ny, nx = g.shape
    n = nz * ny * nx
    matrix = np.zeros((n, n))

    def index(k: int, j: int, i: int) -> int:
        return (k * ny + j) * nx + i

    for k in range(nz):
        for j in range(ny):
            for i in range(nx):
                row = index(k, j, i)
                for step in (-1, 1):
                    matrix[row, index(k, (j + step) % ny, i)] += 1 / g.dy**2
                    matrix[row, row] -= 1 / g.dy**2
                    matrix[row, index(k, j, (i + step) % nx)] += 1 / g.dx**2
                    matrix[row, row] -= 1 / g.dx**2
                    if 0 <= k + step < nz:
                        matrix[row, index(k + step, j, i)] += 1 / g.dz**2
                        matrix[row, row] -= 1 / g.dz**2
    return matrix


def apply_dense(g: decomp.GlobalGrid, values: np.ndarray[Any, Any]) -> np.ndarray[Any, Any]:
    return (dense_laplacian(g) @ values.ravel()).reshape(g.shape)


def dense_solve(g: decomp.GlobalGrid, rhs: np.ndarray[Any, Any]) -> np.ndarray[Any, Any]:
    """
    The mean zero solution through the pseudo inverse
    """
    solution = np.linalg.pinv(dense_laplacian(g)) @ rhs.ravel()
    return (solution - solution.mean()).reshape(g.shape)


def mean_zero(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray[Any, Any]:
    values = rng.standard_normal(shape)
    return values - values.mean()


def relative(a: np.ndarray[Any, Any], b: np.ndarray[Any, Any]) -> float:
    scale = float(np.max(np.abs(b)))
    return float(np.max(np.abs(a - b))) / (scale if scale else 1.0)


def horizontal_reduce(values: np.ndarray[Any, Any], operator: str) -> np.ndarray[Any, Any]:
    levels = values.reshape(values.shape[0], -1)
    if operator == "mean":
        return levels.mean(axis=1)
    elif operator == "max":
        return levels.max(axis=1)
    elif operator == "min":
        return levels.min(axis=1)
    return levels.sum(axis=1)


def spectral_radius(matrix: np.ndarray[Any, Any], iterations: int = 2000) -> float:
    """
    Largest eigenvalue magnitude by power iteration, taken two steps at a time
    so a pair of eigenvalues of opposite sign still settles.
    """
    vector = np.random.default_rng(0).standard_normal(matrix.shape[0])
    for _ in range(iterations):
        vector = matrix @ vector
        vector /= np.linalg.norm(vector)
    return float(np.sqrt(np.linalg.norm(matrix @ (matrix @ vector))))
