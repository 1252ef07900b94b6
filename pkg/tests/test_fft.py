from typing import Any

import attrs
import numpy as np
import pytest
import scipy.fft

from moncmini import decomp, errors, fft, protocols, stencil, transport
from moncmini.options import load_config
from tests import oracles

Array = np.ndarray[Any, Any]

## FIXTURES


def residual(
    g: decomp.GlobalGrid, solution: Array, rhs: Array, workers: int = 1
) -> float:
    """
    Relative residual of A solution = rhs measured with the distributed stencil
    """
    layouts = decomp.decompose(g, workers)

    def target(endpoint: protocols.Transport) -> Array:
        field = decomp.Field3D.from_global(layouts[endpoint.rank], solution)
        return decomp.gather_global(stencil.apply_operator(field, endpoint), endpoint)

    applied = oracles.on_world(workers, target)[0]
    return float(np.linalg.norm(applied - rhs) / np.linalg.norm(rhs))


def solve_on(
    workers: int,
    g: decomp.GlobalGrid,
    rhs: Array,
    config: stencil.SolverConfig | None = None,
    kernel: protocols.TransformKernel | None = None,
) -> Array:
    layouts = decomp.decompose(g, workers)
    solver_config = config or stencil.SolverConfig()

    def target(endpoint: protocols.Transport) -> Array:
        field = decomp.Field3D.from_global(layouts[endpoint.rank], rhs)
        solution = fft.solve_pressure_fft(field, endpoint, solver_config, kernel)
        return decomp.gather_global(solution, endpoint)

    results = oracles.on_world(workers, target)
    for result in results[1:]:
        np.testing.assert_array_equal(result, results[0])
    return results[0]


def tridiagonal(nz: int, eigenvalue: float, dz: float) -> Array:
    cz = 1.0 / dz**2
    matrix = np.diag(np.full(nz, -eigenvalue))
    for k in range(nz):
        for other in (k - 1, k + 1):
            if 0 <= other < nz:
                matrix[k, other] += cz
                matrix[k, k] -= cz
    return matrix


## TESTS


class TestTransformSizes:
    @pytest.mark.parametrize("n", [1, 2, 8, 30, 60, 64, 75])
    def test_it_accepts_products_of_two_three_and_five(self, n: int) -> None:
        fft.check_transform_size(n, key="x_size")

    @pytest.mark.parametrize("n", [7, 14, 22, 49])
    def test_it_rejects_other_sizes(self, n: int) -> None:
        with pytest.raises(errors.ConfigurationError) as e:
            fft.check_transform_size(n, key="y_size")
        assert e.value.key == "y_size"

    def test_the_solver_checks_the_grid_before_solving(self) -> None:
        solver = fft.FFTSolver(config=stencil.SolverConfig())
        with pytest.raises(errors.ConfigurationError) as e:
            solver.prepare(oracles.grid((4, 8, 7)))
        assert e.value.key == "x_size"


class TestKernels:
    @pytest.mark.parametrize("n", [5, 6, 8])
    def test_the_naive_kernel_agrees_with_scipy(self, n: int) -> None:
        data = np.random.default_rng(n).standard_normal((3, 4, n))
        naive = fft.NaiveDFTKernel()

        forward = naive.plan(n, real=True).forward(data, 2)
        np.testing.assert_allclose(forward, scipy.fft.rfft(data, axis=2), atol=1e-10)
        back = naive.plan(n, real=True).backward(forward, 2)
        np.testing.assert_allclose(back, data, atol=1e-10)

        swapped = np.moveaxis(data, 2, 1).astype(np.complex128)
        forward = naive.plan(n, real=False).forward(swapped, 1)
        np.testing.assert_allclose(forward, scipy.fft.fft(swapped, axis=1), atol=1e-10)
        back = naive.plan(n, real=False).backward(forward, 1)
        np.testing.assert_allclose(back, swapped, atol=1e-10)

    def test_the_kernel_is_picked_from_options(self) -> None:
        assert isinstance(fft.kernel_from_options(load_config("")), fft.ScipyFFTKernel)
        assert isinstance(
            fft.kernel_from_options(load_config("fft_kernel='naive'")), fft.NaiveDFTKernel
        )
        with pytest.raises(errors.ConfigurationError) as e:
            fft.kernel_from_options(load_config("fft_kernel='fftw'"))
        assert e.value.key == "fft_kernel"

    def test_the_modified_wavenumbers_are_those_of_the_second_difference(self) -> None:
        n, spacing = 8, 2.0
        g = oracles.grid((2, n, n), (1.0, spacing, 3.0))
        wavenumbers = fft.ModifiedWavenumbers.for_grid(g)
        assert wavenumbers.lambda_y.shape == (n,)
        assert wavenumbers.lambda_x.shape == (n // 2 + 1,)
        assert wavenumbers.lambda_y[0] == 0.0

        mode = np.cos(2 * np.pi * 3 * np.arange(n) / n)
        second_difference = (np.roll(mode, 1) - 2 * mode + np.roll(mode, -1)) / spacing**2
        np.testing.assert_allclose(second_difference, -wavenumbers.lambda_y[3] * mode, atol=1e-12)


class TestTransforms:
    @pytest.mark.parametrize("workers", [1, 2, 4])
    @pytest.mark.parametrize(
        "precision", [pytest.param(p, id=p.value) for p in protocols.Precision]
    )
    def test_backward_undoes_forward(self, workers: int, precision: protocols.Precision) -> None:
        g = oracles.grid((3, 6, 10))
        values = np.random.default_rng(workers).standard_normal(g.shape)
        layouts = decomp.decompose(g, workers)

        def target(endpoint: protocols.Transport) -> tuple[complex, Array]:
            field = decomp.Field3D.from_global(layouts[endpoint.rank], values, precision)
            spectral = fft.forward_transform(field, endpoint)
            assert spectral.precision is precision
            mean_mode = complex(0)
            if endpoint.rank == 0:
                mean_mode = complex(spectral.coefficients.data[0, 0, 0])
            restored = fft.backward_transform(spectral, endpoint)
            return mean_mode, decomp.gather_global(restored, endpoint)

        results = oracles.on_world(workers, target)
        bound = 100 * np.finfo(precision.dtype).eps * np.abs(values).max()
        assert abs(results[0][0] - values[0].sum()) <= bound * g.y_size * g.x_size
        for _, restored in results:
            assert restored.dtype == precision.dtype
            assert np.abs(restored - values).max() <= bound


class TestThomas:
    def test_it_matches_a_dense_tridiagonal_solve(self) -> None:
        nz, dz = 7, 0.5
        eigenvalues = np.array([0.3, 1.0, 12.0])
        rng = np.random.default_rng(1)
        rhs = rng.standard_normal((nz, 3)) + 1j * rng.standard_normal((nz, 3))

        solution = fft.thomas_columns(rhs, eigenvalues, dz)
        for column, eigenvalue in enumerate(eigenvalues):
            expected = np.linalg.solve(tridiagonal(nz, eigenvalue, dz), rhs[:, column])
            np.testing.assert_allclose(solution[:, column], expected, rtol=1e-12, atol=1e-12)

    def test_a_pinned_column_gives_the_mean_zero_solution(self) -> None:
        nz, dz = 6, 2.0
        rhs = oracles.mean_zero(np.random.default_rng(2), (nz, 1)).astype(np.complex128)

        solution = fft.thomas_columns(rhs, np.zeros(1), dz, pinned=np.ones(1, dtype=bool))
        assert abs(solution[:, 0].mean()) < 1e-12
        applied = tridiagonal(nz, 0.0, dz) @ solution[:, 0]
        np.testing.assert_allclose(applied, rhs[:, 0], atol=1e-12)

    def test_it_keeps_single_precision(self) -> None:
        rhs = np.ones((4, 2), dtype=np.float32)
        assert fft.thomas_columns(rhs, np.array([1.0, 2.0]), 1.0).dtype == np.complex64


class TestSolvePressure:
    @pytest.mark.parametrize("workers", [1, 2, 4])
    @pytest.mark.parametrize(
        "shape,spacing",
        [
            pytest.param((8, 8, 8), (1.0, 1.0, 1.0), id="cube"),
            pytest.param((16, 16, 16), (10.0, 50.0, 50.0), id="boundary_layer_spacing"),
        ],
    )
    def test_it_solves_to_round_off(
        self, workers: int, shape: tuple[int, int, int], spacing: tuple[float, float, float]
    ) -> None:
        g = oracles.grid(shape, spacing)
        rhs = oracles.mean_zero(np.random.default_rng(workers), g.shape)

        solution = solve_on(workers, g, rhs)
        assert abs(solution.mean()) < 1e-12 * np.abs(solution).max()
        assert residual(g, solution, rhs, workers) <= 1e-10

    def test_it_agrees_with_a_dense_solve(self) -> None:
        g = oracles.grid((8, 8, 8), (10.0, 50.0, 40.0))
        rhs = oracles.mean_zero(np.random.default_rng(8), g.shape)
        assert oracles.relative(solve_on(2, g, rhs), oracles.dense_solve(g, rhs)) < 1e-8

    def test_the_naive_kernel_gives_the_same_answer(self) -> None:
        g = oracles.grid((4, 6, 10))
        rhs = oracles.mean_zero(np.random.default_rng(4), g.shape)
        with_scipy = solve_on(2, g, rhs)
        with_naive = solve_on(2, g, rhs, kernel=fft.NaiveDFTKernel())
        np.testing.assert_allclose(with_naive, with_scipy, atol=1e-10)

    def test_it_refuses_a_source_with_a_mean(self) -> None:
        g = oracles.grid((4, 4, 4))
        rhs = oracles.mean_zero(np.random.default_rng(0), g.shape) + 0.5

        with pytest.raises(errors.SingularityError) as e:
            solve_on(1, g, rhs)
        assert e.value.mean == pytest.approx(0.5)

    @pytest.mark.parametrize(
        "precision,bias,refused",
        [
            pytest.param(protocols.Precision.SINGLE, 1e-7, False, id="single_rounding"),
            pytest.param(protocols.Precision.SINGLE, 1e-3, True, id="single_bias"),
            pytest.param(protocols.Precision.DOUBLE, 1e-7, True, id="double_bias"),
        ],
    )
    def test_how_much_mean_it_tolerates_depends_on_the_precision(
        self, precision: protocols.Precision, bias: float, refused: bool
    ) -> None:
        g = oracles.grid((4, 4, 4))
        rhs = oracles.mean_zero(np.random.default_rng(2), g.shape)
        rhs = (rhs / np.abs(rhs).max() + bias).astype(precision.dtype)
        config = stencil.SolverConfig(precision=precision)

        if refused:
            with pytest.raises(errors.SingularityError) as e:
                solve_on(1, g, rhs, config)
            assert e.value.mean == pytest.approx(bias, rel=1e-2)
        else:
            assert solve_on(1, g, rhs, config).dtype == np.float32

    def test_a_zero_source_gives_zero_pressure_without_transforms(self) -> None:
        g = oracles.grid((4, 4, 4))
        layout = decomp.decompose(g, 1)[0]
        endpoint = transport.CountingTransport(transport.InProcessWorld(1).endpoint(0))

        solution = fft.solve_pressure_fft(
            decomp.Field3D.zeros(layout), endpoint, stencil.SolverConfig()
        )
        assert (solution.interior == 0).all()
        assert endpoint.alltoalls == 0

    @pytest.mark.parametrize("workers", [1, 4])
    def test_it_does_eight_transposes_per_solve(self, workers: int) -> None:
        g = oracles.grid((4, 8, 8))
        rhs = oracles.mean_zero(np.random.default_rng(0), g.shape)
        layouts = decomp.decompose(g, workers)

        def target(endpoint: protocols.Transport) -> tuple[int, int]:
            assert isinstance(endpoint, transport.TransportBase)
            counting = transport.CountingTransport(endpoint)
            field = decomp.Field3D.from_global(layouts[endpoint.rank], rhs)
            fft.solve_pressure_fft(field, counting, stencil.SolverConfig())
            return counting.alltoalls, counting.halo_exchanges

        assert oracles.on_world(workers, target) == [(8, 0)] * workers

    def test_single_precision_stays_single_and_close(self) -> None:
        g = oracles.grid((8, 8, 8))
        rhs = oracles.mean_zero(np.random.default_rng(5), g.shape).astype(np.float32)
        config = stencil.SolverConfig(precision=protocols.Precision.SINGLE)

        solution = solve_on(2, g, rhs, config)
        assert solution.dtype == np.float32
        assert residual(g, solution.astype(np.float64), rhs.astype(np.float64), 2) < 1e-3

    def test_the_vertical_solve_needs_z_pencils(self) -> None:
        g = oracles.grid((4, 4, 4))
        layout = decomp.decompose(g, 1)[0]
        endpoint = transport.InProcessWorld(1).endpoint(0)
        rhs = oracles.mean_zero(np.random.default_rng(0), g.shape)

        spectral = fft.forward_transform(decomp.Field3D.from_global(layout, rhs), endpoint)
        turned = attrs.evolve(
            spectral,
            coefficients=decomp.pencil_transpose(
                spectral.coefficients, protocols.Orientation.X, endpoint
            ),
        )
        with pytest.raises(errors.DecompositionError):
            fft.vertical_ode_solve(turned)

    def test_the_solver_object_solves_the_same_problem(self) -> None:
        g = oracles.grid((4, 6, 6))
        rhs = oracles.mean_zero(np.random.default_rng(6), g.shape)
        layout = decomp.decompose(g, 1)[0]
        solver = fft.FFTSolver(config=stencil.SolverConfig())
        solver.prepare(g)

        solution = solver.solve(
            decomp.Field3D.from_global(layout, rhs), transport.InProcessWorld(1).endpoint(0)
        )
        np.testing.assert_allclose(solution.interior, solve_on(1, g, rhs), atol=1e-12)
