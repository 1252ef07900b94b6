import functools
import pathlib
import struct
from typing import Any

import numpy as np
import pytest

from moncmini import checkpoint, decomp, errors, protocols
from moncmini.options import OptionsDatabase, OptionValue
from moncmini.rank import RunSettings, rank_main
from moncmini.state import ModelState
from moncmini.transport import InProcessWorld
from tests import oracles

Array = np.ndarray[Any, Any]

## FIXTURES

RUN = """
z_size=6
y_size=8
x_size=8
dz=10.0
dy=50.0
dx=50.0
dtm=1.0
ug=4.0
vg=2.0
theta_perturbation_amplitude=0.3
seed=5
dry_boundary_layer_enabled=.true.
dynamics_enabled=.true.
pressure_source_enabled=.true.
fftsolver_enabled=.true.
projection_enabled=.true.
checkpointer_enabled=.true.
"""


@pytest.fixture
def sample() -> checkpoint.Checkpoint:
    rng = np.random.default_rng(0)
    shape = (3, 4, 5)
    return checkpoint.Checkpoint(
        options=OptionsDatabase(entries={"dtm": 0.5, "seed": 3, "name": "bomex"}),
        grid_shape=shape,
        timestep=12,
        time=6.0,
        fields={
            "u": rng.standard_normal(shape),
            "v": rng.standard_normal(shape),
            "w": rng.standard_normal(shape),
            "theta": rng.standard_normal(shape).astype(np.float32),
        },
    )


def run(
    tmp_path: pathlib.Path,
    name: str,
    *,
    steps: int,
    workers: int = 1,
    restart: pathlib.Path | None = None,
) -> checkpoint.Checkpoint:
    path = tmp_path / f"{name}.bin"
    overrides: dict[str, OptionValue] = {"nn_timesteps": steps, "checkpoint_path": str(path)}
    settings = RunSettings(
        config_text=RUN,
        workers=workers,
        restart=None if restart is None else str(restart),
        overrides=overrides,
    )
    outcomes = oracles.on_world(workers, functools.partial(rank_main, settings))
    assert all(outcome.timestep == steps for outcome in outcomes)
    return checkpoint.read_checkpoint(path)


## TESTS


class TestFormat:
    def test_it_decodes_what_it_encodes(self, sample: checkpoint.Checkpoint) -> None:
        decoded = checkpoint.decode_checkpoint(checkpoint.encode_checkpoint(sample))
        assert decoded == sample
        assert list(decoded.fields) == ["u", "v", "w", "theta"]
        for name, values in sample.fields.items():
            assert decoded.fields[name].dtype == values.dtype
            assert decoded.fields[name].tobytes() == values.tobytes()

    def test_it_orders_known_fields_first(self) -> None:
        assert checkpoint.field_order(["tracer", "theta", "p", "u", "aerosol"]) == [
            "u",
            "theta",
            "p",
            "aerosol",
            "tracer",
        ]

    def test_it_stores_z_fastest(self) -> None:
        values = np.arange(8, dtype=np.float64).reshape((2, 2, 2))
        data = checkpoint.encode_checkpoint(
            checkpoint.Checkpoint(
                options=OptionsDatabase(entries={}),
                grid_shape=(2, 2, 2),
                timestep=0,
                time=0.0,
                fields={"u": values},
            )
        )
        stored = np.frombuffer(data[-64:], dtype="<f8")
        assert list(stored) == [0, 4, 2, 6, 1, 5, 3, 7]

    @pytest.mark.parametrize(
        "damage,message",
        [
            pytest.param(lambda data: b"NOTMONC!" + data[8:], "Not a checkpoint", id="magic"),
            pytest.param(
                lambda data: data[:8] + struct.pack("<I", 2) + data[12:],
                "Unsupported checkpoint version 2",
                id="version",
            ),
            pytest.param(lambda data: data[:-3], "truncated", id="truncated"),
            pytest.param(lambda data: data[:10], "truncated", id="header_only"),
            pytest.param(lambda data: data + b"\0", "1 trailing bytes", id="trailing"),
        ],
    )
    def test_it_complains_about_damaged_files(
        self, sample: checkpoint.Checkpoint, damage: Any, message: str
    ) -> None:
        data = damage(checkpoint.encode_checkpoint(sample))
        with pytest.raises(errors.CheckpointFormatError) as e:
            checkpoint.decode_checkpoint(data, path="damaged.bin")
        assert message in e.value.message
        assert e.value.path == "damaged.bin"
        assert e.value.exit_code == 4

    def test_it_complains_about_a_missing_field(
        self, sample: checkpoint.Checkpoint, tmp_path: pathlib.Path
    ) -> None:
        path = tmp_path / "partial_fields.bin"
        fields = {name: values for name, values in sample.fields.items() if name != "theta"}
        path.write_bytes(
            checkpoint.encode_checkpoint(
                checkpoint.Checkpoint(
                    options=sample.options,
                    grid_shape=sample.grid_shape,
                    timestep=sample.timestep,
                    time=sample.time,
                    fields=fields,
                )
            )
        )
        with pytest.raises(errors.CheckpointFormatError) as e:
            checkpoint.read_checkpoint(path)
        assert e.value.field == "theta"

    def test_it_complains_about_a_file_that_is_not_there(self, tmp_path: pathlib.Path) -> None:
        with pytest.raises(errors.StorageError) as e:
            checkpoint.read_checkpoint(tmp_path / "nope.bin")
        assert e.value.path == str(tmp_path / "nope.bin")


class TestWriting:
    def test_a_failed_write_leaves_nothing_behind(
        self, sample: checkpoint.Checkpoint, tmp_path: pathlib.Path
    ) -> None:
        target = tmp_path / "occupied"
        target.mkdir()
        with pytest.raises(errors.CheckpointWriteError):
            checkpoint.write_checkpoint_file(target, sample)
        assert sorted(path.name for path in tmp_path.iterdir()) == ["occupied"]

    def test_every_rank_learns_that_a_write_failed(self, tmp_path: pathlib.Path) -> None:
        g = oracles.grid((2, 4, 4))
        layouts = decomp.decompose(g, 2)
        target = tmp_path / "occupied"
        target.mkdir()

        def attempt(endpoint: protocols.Transport) -> bool:
            state = ModelState.fresh(
                layout=layouts[endpoint.rank],
                options=OptionsDatabase(entries={}),
                transport=endpoint,
            )
            state.fields["u"] = decomp.Field3D.zeros(state.layout)
            with pytest.raises(errors.CheckpointWriteError):
                checkpoint.checkpoint_write(state, target)
            return True

        assert oracles.on_world(2, attempt) == [True, True]

    @pytest.mark.parametrize("workers", [1, 3])
    def test_written_files_do_not_depend_on_the_decomposition(
        self, workers: int, tmp_path: pathlib.Path
    ) -> None:
        g = oracles.grid((2, 6, 4))
        values = np.random.default_rng(0).standard_normal(g.shape)
        layouts = decomp.decompose(g, workers)
        path = tmp_path / f"w{workers}.bin"

        def write(endpoint: protocols.Transport) -> None:
            state = ModelState.fresh(
                layout=layouts[endpoint.rank],
                options=OptionsDatabase(entries={"seed": 1}),
                transport=endpoint,
            )
            state.fields["theta"] = decomp.Field3D.from_global(state.layout, values)
            checkpoint.checkpoint_write(state, path)

        oracles.on_world(workers, write)
        stored = checkpoint.read_checkpoint(path, required=["theta"])
        assert stored.fields["theta"].tobytes() == values.tobytes()


class TestRestoring:
    def test_it_restores_onto_any_layout(self, sample: checkpoint.Checkpoint) -> None:
        g = oracles.grid(sample.grid_shape)
        layouts = decomp.decompose(g, 2)

        def restore(endpoint: protocols.Transport) -> Array:
            state = checkpoint.restore_state(
                sample,
                layouts[endpoint.rank],
                transport=endpoint,
                options=OptionsDatabase(entries={"dtm": 0.25}),
            )
            assert state.restarted
            assert (state.timestep, state.time, state.dtm) == (12, 6.0, 0.25)
            assert state.options.get_int("seed") == 3
            assert state.field("theta").precision is protocols.Precision.SINGLE
            assert (state.field("p").interior == 0).all()
            return decomp.gather_global(state.field("u"), endpoint)

        for u in oracles.on_world(2, restore):
            assert u.tobytes() == sample.fields["u"].tobytes()

    def test_it_refuses_a_checkpoint_of_another_grid(self, sample: checkpoint.Checkpoint) -> None:
        layout = decomp.decompose(oracles.grid((3, 4, 6)), 1)[0]
        with pytest.raises(errors.DecompositionError):
            checkpoint.restore_state(sample, layout, transport=InProcessWorld(1).endpoint(0))

    def test_it_reads_a_state_straight_from_a_file(
        self, sample: checkpoint.Checkpoint, tmp_path: pathlib.Path
    ) -> None:
        path = tmp_path / "sample.bin"
        checkpoint.write_checkpoint_file(path, sample)
        layout = decomp.decompose(oracles.grid(sample.grid_shape), 1)[0]
        state = checkpoint.checkpoint_read(path, layout, transport=InProcessWorld(1).endpoint(0))
        assert state.timestep == 12
        np.testing.assert_array_equal(state.field("v").interior, sample.fields["v"])


class TestRestartDeterminism:
    def test_a_restarted_run_matches_an_uninterrupted_one(self, tmp_path: pathlib.Path) -> None:
        straight = run(tmp_path, "straight", steps=10)
        run(tmp_path, "half", steps=5)
        resumed = run(tmp_path, "resumed", steps=10, restart=tmp_path / "half.bin")

        assert (resumed.timestep, resumed.time) == (straight.timestep, straight.time)
        for name, values in straight.fields.items():
            assert resumed.fields[name].tobytes() == values.tobytes(), name

    def test_a_run_can_continue_on_more_workers(self, tmp_path: pathlib.Path) -> None:
        straight = run(tmp_path, "straight", steps=8)
        run(tmp_path, "half", steps=4)
        resumed = run(tmp_path, "resumed", steps=8, workers=4, restart=tmp_path / "half.bin")

        assert resumed.timestep == 8
        for name, values in straight.fields.items():
            np.testing.assert_allclose(
                resumed.fields[name], values, rtol=1e-12, atol=1e-12, err_msg=name
            )
