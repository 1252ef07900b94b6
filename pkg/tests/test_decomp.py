from typing import Any

import numpy as np
import pytest

from moncmini import decomp, errors, protocols, transport
from tests import oracles

Array = np.ndarray[Any, Any]


class TestSplitting:
    @pytest.mark.parametrize(
        "n,parts,expected",
        [
            pytest.param(10, 3, [(0, 4), (4, 3), (7, 3)], id="remainder_goes_first"),
            pytest.param(8, 4, [(0, 2), (2, 2), (4, 2), (6, 2)], id="even"),
            pytest.param(3, 3, [(0, 1), (1, 1), (2, 1)], id="one_each"),
        ],
    )
    def test_it_splits_into_near_equal_parts(
        self, n: int, parts: int, expected: list[tuple[int, int]]
    ) -> None:
        assert [decomp.balanced_split(n, parts, index) for index in range(parts)] == expected

    @pytest.mark.parametrize(
        "workers,expected",
        [
            pytest.param(1, (1, 1), id="one"),
            pytest.param(2, (1, 2), id="two"),
            pytest.param(4, (2, 2), id="four"),
            pytest.param(6, (2, 3), id="six"),
            pytest.param(7, (1, 7), id="prime"),
            pytest.param(8, (2, 4), id="eight"),
        ],
    )
    def test_it_picks_the_most_square_worker_grid(
        self, workers: int, expected: tuple[int, int]
    ) -> None:
        assert decomp.worker_grid(workers) == expected

    def test_it_lays_ranks_out_row_major(self) -> None:
        layouts = decomp.decompose(oracles.grid((4, 8, 16)), 8)
        assert (layouts[0].py, layouts[0].px) == (2, 4)
        assert (layouts[5].iy, layouts[5].ix) == (1, 1)
        assert layouts[5].neighbours == {"-y": 1, "+y": 1, "-x": 4, "+x": 6}
        assert layouts[5].row_peers == [4, 5, 6, 7]
        assert layouts[5].column_peers == [1, 5]

    def test_it_covers_the_plane_exactly_once(self) -> None:
        g = oracles.grid((2, 7, 11))
        counts = np.zeros((7, 11), dtype=int)
        for layout in decomp.decompose(g, 6):
            (y0, ny), (x0, nx) = layout.y_extent, layout.x_extent
            counts[y0 : y0 + ny, x0 : x0 + nx] += 1
        assert (counts == 1).all()

    def test_it_turns_the_grid_when_only_that_fits(self) -> None:
        layouts = decomp.decompose(oracles.grid((4, 8, 1)), 2)
        assert (layouts[0].py, layouts[0].px) == (2, 1)

    @pytest.mark.parametrize(
        "shape,workers",
        [
            pytest.param((4, 1, 1), 2, id="single_column"),
            pytest.param((4, 2, 2), 8, id="more_workers_than_columns"),
        ],
    )
    def test_it_refuses_to_leave_a_worker_empty(
        self, shape: tuple[int, int, int], workers: int
    ) -> None:
        with pytest.raises(errors.DecompositionError):
            decomp.decompose(oracles.grid(shape), workers)

    def test_it_validates_the_grid(self) -> None:
        with pytest.raises(errors.ConfigurationError) as e:
            oracles.grid((0, 4, 4))
        assert e.value.key == "z_size"
        with pytest.raises(errors.ConfigurationError) as e:
            oracles.grid((4, 4, 4), (1.0, 0.0, 1.0))
        assert e.value.key == "dy"


class TestField3D:
    def test_it_checks_the_shape_of_its_data(self) -> None:
        layout = decomp.decompose(oracles.grid((2, 4, 4)), 1)[0]
        with pytest.raises(errors.DecompositionError):
            decomp.Field3D(layout=layout, data=np.zeros((2, 4, 4)))

    def test_it_slices_its_block_out_of_a_global_array(self) -> None:
        g = oracles.grid((2, 4, 6))
        values = np.arange(48, dtype=np.float32).reshape(g.shape)
        layout = decomp.decompose(g, 2)[1]
        field = decomp.Field3D.from_global(layout, values)
        assert field.precision is protocols.Precision.SINGLE
        assert field.data.shape == (2, 6, 5)
        np.testing.assert_array_equal(field.interior, values[:, :, 3:])


class TestHaloExchange:
    @pytest.mark.parametrize("workers", [1, 2, 4, 6])
    @pytest.mark.parametrize("halo_width", [1, 2])
    def test_it_fills_halos_with_periodic_neighbours(self, workers: int, halo_width: int) -> None:
        g = oracles.grid((3, 6, 8))
        values = np.random.default_rng(workers).standard_normal(g.shape)
        h = halo_width
        wrapped = np.pad(values, ((0, 0), (h, h), (h, h)), mode="wrap")
        layouts = decomp.decompose(g, workers, halo_width=h)

        def target(transport: protocols.Transport) -> bool:
            layout = layouts[transport.rank]
            field = decomp.Field3D.from_global(layout, values)
            decomp.halo_exchange(field, transport)
            (y0, ny), (x0, nx) = layout.y_extent, layout.x_extent
            expected = wrapped[:, y0 : y0 + ny + 2 * h, x0 : x0 + nx + 2 * h]
            np.testing.assert_array_equal(field.data, expected)
            return True

        assert all(oracles.on_world(workers, target))


class TestTransposes:
    @pytest.mark.parametrize("workers", [1, 2, 4, 6])
    def test_it_moves_complete_lines_to_each_axis(self, workers: int) -> None:
        g = oracles.grid((5, 6, 7))
        values = np.random.default_rng(workers).standard_normal(g.shape)
        layouts = decomp.decompose(g, workers)
        Z, Y, X = protocols.Orientation.Z, protocols.Orientation.Y, protocols.Orientation.X

        def target(transport: protocols.Transport) -> bool:
            field = decomp.Field3D.from_global(layouts[transport.rank], values)
            x_pencil = decomp.pencil_transpose(field, X, transport)
            assert x_pencil.data.shape[2] == 7
            y_pencil = decomp.pencil_transpose(x_pencil, Y, transport)
            assert y_pencil.data.shape[1] == 6

            np.testing.assert_array_equal(decomp.gather_global(x_pencil, transport), values)
            np.testing.assert_array_equal(decomp.gather_global(y_pencil, transport), values)

            back = decomp.pencil_transpose(y_pencil, Z, transport)
            assert back.orientation is Z
            np.testing.assert_array_equal(back.to_field().interior, field.interior)
            return True

        assert all(oracles.on_world(workers, target))

    def test_only_z_pencils_have_halos(self) -> None:
        layout = decomp.decompose(oracles.grid((2, 2, 2)), 1)[0]
        pencil = decomp.Pencil(
            layout=layout,
            orientation=protocols.Orientation.X,
            global_shape=(2, 2, 2),
            data=np.zeros((2, 2, 2)),
        )
        with pytest.raises(errors.DecompositionError):
            pencil.to_field()


class TestCollectives:
    def test_it_reduces_to_the_same_answer_everywhere(self) -> None:
        def target(transport: protocols.Transport) -> tuple[Array, Array, Array]:
            mine = np.array([transport.rank + 1.0, -float(transport.rank)])
            return (
                decomp.global_reduce(mine, protocols.ReductionOp.SUM, transport),
                decomp.global_reduce(mine, protocols.ReductionOp.MAX, transport),
                decomp.global_reduce(mine, protocols.ReductionOp.MIN, transport),
            )

        for total, largest, smallest in oracles.on_world(5, target):
            np.testing.assert_array_equal(total, [15.0, -10.0])
            np.testing.assert_array_equal(largest, [5.0, 0.0])
            np.testing.assert_array_equal(smallest, [1.0, -4.0])

    def test_it_gathers_and_scatters_global_arrays(self) -> None:
        g = oracles.grid((2, 5, 3))
        values = np.random.default_rng(0).standard_normal(g.shape)
        layouts = decomp.decompose(g, 3)

        def target(transport: protocols.Transport) -> Array:
            field = decomp.scatter_global(values, layouts[transport.rank])
            return decomp.gather_global(field, transport)

        for gathered in oracles.on_world(3, target):
            np.testing.assert_array_equal(gathered, values)

    def test_it_can_gather_to_the_root_alone(self) -> None:
        g = oracles.grid((2, 4, 6))
        values = np.random.default_rng(1).standard_normal(g.shape)
        layouts = decomp.decompose(g, 4)

        def target(endpoint: protocols.Transport) -> tuple[Array | None, int]:
            assert isinstance(endpoint, transport.TransportBase)
            counting = transport.CountingTransport(endpoint)
            field = decomp.scatter_global(values, layouts[endpoint.rank])
            gathered = decomp.gather_to_root(field, counting, root=2)
            return gathered, counting.sends[protocols.Tag.GATHER]

        results = oracles.on_world(4, target)
        gathered, root_sends = results[2]
        assert gathered is not None
        np.testing.assert_array_equal(gathered, values)
        assert root_sends == 0
        assert [result for rank, result in enumerate(results) if rank != 2] == [(None, 1)] * 3
