import pytest

from moncmini import engine, errors, registry, transport
from moncmini.decomp import decompose
from moncmini.options import OptionsDatabase, OptionValue
from moncmini.state import ModelState
from tests import oracles

## FIXTURES


def make_state(**entries: OptionValue) -> ModelState:
    layout = decompose(oracles.grid((2, 2, 2)), 1)[0]
    return ModelState.fresh(
        layout=layout,
        options=OptionsDatabase(entries=entries),
        transport=transport.InProcessWorld(1).endpoint(0),
    )


def make_registry(
    options: OptionsDatabase, *descriptors: registry.ComponentDescriptor
) -> registry.Registry:
    reg = registry.Registry()
    for descriptor in descriptors:
        reg.register(descriptor, options)
    return reg.finalise(options)


## TESTS


class TestRunModel:
    def test_it_advances_the_clock_before_each_timestep_sweep(self) -> None:
        state = make_state(nn_timesteps=4, dtm=0.5, clock_enabled=True)
        seen: list[tuple[int, float]] = []

        def record(state: ModelState) -> None:
            seen.append((state.timestep, state.time))

        reg = make_registry(
            state.options, registry.ComponentDescriptor(name="clock", timestep_callback=record)
        )
        engine.run_model(state, reg)

        assert seen == [(1, 0.5), (2, 1.0), (3, 1.5), (4, 2.0)]
        assert state.timestep == 4
        assert state.loop_seconds >= 0

    def test_it_stops_when_a_component_says_so(self) -> None:
        state = make_state(stopper_enabled=True)

        def stop(state: ModelState) -> None:
            if state.timestep == 3:
                state.continue_run = False

        reg = make_registry(
            state.options, registry.ComponentDescriptor(name="stopper", timestep_callback=stop)
        )
        engine.run_model(state, reg)
        assert state.timestep == 3

    def test_it_resumes_a_restored_state_at_the_next_timestep(self) -> None:
        state = make_state(nn_timesteps=7, clock_enabled=True)
        state.timestep = 5
        state.time = 5.0
        seen: list[int] = []

        def record(state: ModelState) -> None:
            seen.append(state.timestep)

        reg = make_registry(
            state.options, registry.ComponentDescriptor(name="clock", timestep_callback=record)
        )
        engine.run_model(state, reg)
        assert seen == [6, 7]

    def test_it_does_not_let_the_timestep_go_backwards(self) -> None:
        state = make_state()
        state.timestep = 3
        with pytest.raises(ValueError):
            state.timestep = 2

    def test_it_needs_a_finalised_registry(self) -> None:
        state = make_state()
        with pytest.raises(errors.RegistrationError):
            engine.run_model(state, registry.Registry())

    def test_it_wraps_a_failing_callback_and_still_finalises(self) -> None:
        state = make_state(nn_timesteps=5, broken_enabled=True, cleanup_enabled=True)
        finalised: list[int] = []

        def explode(state: ModelState) -> None:
            if state.timestep == 2:
                raise errors.StabilityError(message="too fast", courant=1.5)

        def cleanup(state: ModelState) -> None:
            finalised.append(state.timestep)

        def broken_finalise(state: ModelState) -> None:
            raise RuntimeError("finalise failed too")

        reg = make_registry(
            state.options,
            registry.ComponentDescriptor(
                name="broken", timestep_callback=explode, finalise_callback=broken_finalise
            ),
            registry.ComponentDescriptor(name="cleanup", finalise_callback=cleanup),
        )

        with pytest.raises(errors.ComponentFailed) as e:
            engine.run_model(state, reg)

        assert e.value.component == "broken"
        assert e.value.stage == "timestep"
        assert isinstance(e.value.error, errors.StabilityError)
        assert e.value.error.courant == 1.5
        assert e.value.exit_code == 2
        assert state.failure is e.value
        assert state.continue_run is False
        assert finalised == [2]

    def test_it_reports_the_stage_a_component_failed_in(self) -> None:
        state = make_state(broken_enabled=True)

        def explode(state: ModelState) -> None:
            raise errors.MissingOption(message="no seed", key="seed")

        reg = make_registry(
            state.options, registry.ComponentDescriptor(name="broken", init_callback=explode)
        )
        with pytest.raises(errors.ComponentFailed) as e:
            engine.run_model(state, reg)
        assert e.value.stage == "init"
        assert e.value.exit_code == 1
        assert state.timestep == 0
