import pathlib
import time

import numpy as np
import pytest

from moncmini import bridge, decomp, errors, ioserver, launch, protocols
from moncmini.transport import InProcessWorld
from tests import oracles

## FIXTURES

CONFIG = ioserver.IoServerConfig(
    fields=(ioserver.FieldRequest(name="theta"),),
    actions=(
        ioserver.DiagnosticAction(
            field="theta", operator=protocols.DiagnosticOperator.MEAN, output="theta_mean"
        ),
    ),
)


def message(layout: decomp.PencilLayout, timestep: int) -> ioserver.DiagnosticMessage:
    extent = ioserver.SlabExtent.for_layout(layout)
    return ioserver.DiagnosticMessage(
        source=layout.rank,
        timestep=timestep,
        field="theta",
        extent=extent,
        precision=protocols.Precision.DOUBLE,
        values=np.full(extent.shape, float(timestep)),
    )


## TESTS


class TestTransportBridge:
    def test_it_needs_room_for_at_least_one_message(self) -> None:
        with pytest.raises(errors.ConfigurationError) as e:
            bridge.TransportBridge(InProcessWorld(2).endpoint(0), 1, capacity=0)
        assert e.value.key == "ios_queue_capacity"

    def test_it_refuses_to_submit_before_the_handshake(self) -> None:
        layout = decomp.decompose(oracles.grid((2, 2, 2)), 1)[0]
        handle = bridge.TransportBridge(InProcessWorld(2).endpoint(0), 1)
        with pytest.raises(errors.TransmissionError):
            handle.submit(message(layout, 1))

    def test_a_silent_server_fails_the_handshake(self) -> None:
        layout = decomp.decompose(oracles.grid((2, 2, 2)), 1)[0]
        handle = bridge.TransportBridge(InProcessWorld(2, recv_timeout=0.1).endpoint(0), 1)
        with pytest.raises(errors.TransmissionError) as e:
            handle.handshake(layout)
        assert e.value.rank == 1
        assert e.value.exit_code == 3

    def test_submitting_never_waits_for_the_server(self, tmp_path: pathlib.Path) -> None:
        submissions, reduce_seconds = 50, 0.1
        layout = decomp.decompose(oracles.grid((2, 4, 4)), 1)[0]

        def slow_reducer(
            action: ioserver.DiagnosticAction, timestep: int, values: protocols.Array
        ) -> ioserver.ReductionPartial:
            time.sleep(reduce_seconds)
            return ioserver.reduce_slab(action, timestep, values)

        def target(endpoint: protocols.Transport) -> bridge.TransportBridge | ioserver.IoServer:
            if endpoint.rank == 1:
                server = ioserver.IoServer(
                    CONFIG,
                    endpoint,
                    clients=[0],
                    servers=[1],
                    pool_size=1,
                    output=tmp_path / "diagnostics.csv",
                    reducer=slow_reducer,
                )
                server.serve(poll_interval=0.01)
                return server

            handle = bridge.TransportBridge(endpoint, 1)
            assert handle.handshake(layout) == {"theta": 1}
            for timestep in range(1, submissions + 1):
                handle.submit(message(layout, timestep))
            handle.close()
            handle.close()
            with pytest.raises(errors.TransmissionError):
                handle.submit(message(layout, submissions + 1))
            return handle

        handle, server = launch.run_world(2, target, recv_timeout=oracles.RECV_TIMEOUT)
        assert isinstance(handle, bridge.TransportBridge)
        assert isinstance(server, ioserver.IoServer)

        assert handle.submitted == submissions
        assert server.stats.compute_seconds >= submissions * reduce_seconds * 0.9
        assert handle.submit_seconds < 0.1 * server.stats.compute_seconds
        assert server.stats.received == {0: [(t, "theta") for t in range(1, submissions + 1)]}
        assert server.stats.emitted == list(range(1, submissions + 1))

        rows = ioserver.read_diagnostics(tmp_path / "diagnostics.csv")
        assert [(timestep, value) for _, timestep, level, value in rows if level == 1] == [
            (t, float(t)) for t in range(1, submissions + 1)
        ]

    def test_submit_field_hands_the_message_over(self) -> None:
        layout = decomp.decompose(oracles.grid((1, 1, 1)), 1)[0]
        taken: list[ioserver.DiagnosticMessage] = []

        class Handle:
            def handshake(self, layout: decomp.PencilLayout, /) -> dict[str, int]:
                return {}

            def submit(self, message: ioserver.DiagnosticMessage, /) -> None:
                taken.append(message)

            def close(self) -> None:
                pass

        sent = message(layout, 3)
        bridge.submit_field(Handle(), sent)
        assert taken == [sent]
