"""Closed-loop tests: plant truth, scenarios, traces and the controller comparison."""

import math

import numpy as np
import pandas as pd
import pytest

from conetank.controllers import get_controller
from conetank.controllers.base import Controller, Plan
from conetank.errors import SimulationAborted
from conetank.nmpc_solver import OcpConfig
from conetank.qp_solver import SolverStatus
from conetank.simulation import TRACE_COLUMNS, Scenario, SimJob, run_batch, run_closed_loop
from conetank.tank_model import TankParams


class ConstantInflow(Controller):
    """Always asks for the same inflow; used to drive the plant out of the tank."""

    name = "constant"

    def __init__(self, params, config, value, **kwargs):
        self.value = value
        super().__init__(params, config, **kwargs)

    def _plan(self, step, disturbance):
        n = self.config.horizon
        return Plan(np.full(n, self.value), np.full(n, step.measured_level), 0.0, 0, 0.0, SolverStatus.OPTIMAL)

    def _model_prediction(self, model_level, applied_input):
        return model_level


@pytest.fixture(scope="module")
def default_runs():
    """Both controllers on the default 400 s scenario."""
    params = TankParams()
    config = OcpConfig()
    scenario = Scenario()
    return {
        name: run_closed_loop(scenario, get_controller(name, params, config), params)
        for name in ("lmpc", "nmpc")
    }


def window_end_index(trace, event_time):
    """Index of the last sample before ``event_time``."""
    return int(np.flatnonzero(trace.times < event_time)[-1])


class TestScenario:
    def test_reference_lookup(self):
        scenario = Scenario()
        assert scenario.reference_at(0.0) == 0.4
        assert scenario.reference_at(49.9) == 0.4
        assert scenario.reference_at(50.0) == 0.8
        assert scenario.reference_at(500.0) == 0.15

    def test_preview_aligned_with_predicted_levels(self):
        preview = Scenario().reference_preview(44.0, 5, 2.0)
        assert preview == (0.4, 0.4, 0.8, 0.8, 0.8)

    def test_preview_disabled_holds_reference(self):
        preview = Scenario(preview=False).reference_preview(44.0, 5, 2.0)
        assert preview == (0.4,) * 5

    @pytest.mark.parametrize("kwargs", [
        {"reference_schedule": ((0.0, 0.4), (50.0, 0.8), (40.0, 0.2))},
        {"reference_schedule": ((10.0, 0.4),)},
        {"reference_schedule": ((0.0, 0.4), (500.0, 0.8))},
        {"reference_schedule": ()},
        {"duration": 0.0},
        {"plant_substeps": 0},
        {"measurement_noise": -0.01},
    ])
    def test_invalid_scenarios(self, kwargs):
        with pytest.raises(ValueError):
            Scenario(**kwargs)


class TestTrace:
    def test_flat_trace_at_equilibrium(self, params, ocp_config):
        scenario = Scenario(duration=40.0, reference_schedule=((0.0, 0.4),))
        for name in ("lmpc", "nmpc"):
            trace = run_closed_loop(scenario, get_controller(name, params, ocp_config), params)
            assert trace.metrics.ise <= 1e-10
            np.testing.assert_allclose(trace.levels, 0.4, atol=1e-9)

    def test_row_count_and_columns(self, default_runs, tmp_path):
        trace = default_runs["nmpc"]
        assert len(trace.records) == math.floor(400.0 / 2.0) + 1
        path = trace.write_csv(tmp_path / "out" / "trace.csv")
        frame = pd.read_csv(path)
        assert list(frame.columns) == TRACE_COLUMNS
        assert len(frame) == 201
        assert frame["t"].iloc[-1] == 400.0

    def test_increments_are_logged(self, default_runs):
        trace = default_runs["lmpc"]
        frame = trace.to_frame()
        np.testing.assert_allclose(frame["du"].iloc[1:], np.diff(frame["u"]), atol=1e-15)
        assert frame["du"].iloc[0] == pytest.approx(frame["u"].iloc[0] - trace.initial_input)

    def test_sample_time_mismatch_rejected(self, params, ocp_config):
        controller = get_controller("lmpc", TankParams(sample_time=1.0), ocp_config)
        with pytest.raises(ValueError, match="sample time"):
            run_closed_loop(Scenario(duration=10.0), controller, params)


class TestClosedLoop:
    @pytest.mark.parametrize("name", ["lmpc", "nmpc"])
    def test_offset_free_at_end_of_each_window(self, default_runs, name):
        trace = default_runs[name]
        error = np.abs(trace.levels - trace.references)
        # last sample before the preview horizon reaches the next step
        for event_time in (50.0, 350.0):
            assert error[window_end_index(trace, event_time - 2.0 * 10)] <= 1e-3
        assert error[-1] <= 1e-3

    @pytest.mark.parametrize("name", ["lmpc", "nmpc"])
    def test_no_input_constraint_violations(self, default_runs, name):
        trace = default_runs[name]
        assert trace.metrics.constraint_violations == 0
        assert np.all(trace.inputs >= 0.0) and np.all(trace.inputs <= 0.1)
        du = np.array([rec.du for rec in trace.records])
        assert np.all(du >= -0.02) and np.all(du <= 0.02)

    def test_linear_controller_undershoots_more(self, default_runs):
        lmpc = default_runs["lmpc"].metrics.events[-1]
        nmpc = default_runs["nmpc"].metrics.events[-1]
        assert lmpc.direction == nmpc.direction == "down"
        assert lmpc.undershoot >= 2.0 * nmpc.undershoot
        levels = default_runs["nmpc"].levels
        assert np.all(levels >= 0.0) and np.all(levels <= 2.0)

    @pytest.mark.parametrize("name", ["lmpc", "nmpc"])
    def test_preview_anticipates_steps(self, default_runs, name):
        trace = default_runs[name]
        u = trace.inputs
        for event_time in (50.0, 350.0):
            before = window_end_index(trace, event_time)
            baseline = window_end_index(trace, event_time - 2.0 * (10 + 1))
            assert abs(u[before] - u[baseline]) > 1e-4

    @pytest.mark.parametrize("name", ["lmpc", "nmpc"])
    def test_without_preview_input_waits_for_step(self, params, ocp_config, name):
        scenario = Scenario(duration=60.0, reference_schedule=((0.0, 0.4), (50.0, 0.8)), preview=False)
        trace = run_closed_loop(scenario, get_controller(name, params, ocp_config), params)
        u = trace.inputs
        before = window_end_index(trace, 50.0)
        np.testing.assert_array_equal(u[: before + 1], trace.initial_input)
        assert u[before + 1] > trace.initial_input

    @pytest.mark.parametrize("name", ["lmpc", "nmpc"])
    def test_deterministic(self, params, ocp_config, name):
        scenario = Scenario(duration=80.0, measurement_noise=0.002)
        controller = get_controller(name, params, ocp_config)
        first = run_closed_loop(scenario, controller, params, seed=5)
        second = run_closed_loop(scenario, controller, params, seed=5)
        assert first.comparable() == second.comparable()

    def test_model_mismatch_is_absorbed(self, params, ocp_config):
        scenario = Scenario(duration=200.0, reference_schedule=((0.0, 0.5),), valve_coeff_scale=1.1)
        trace = run_closed_loop(scenario, get_controller("nmpc", params, ocp_config), params)
        assert abs(trace.levels[-1] - 0.5) <= 1e-3
        assert trace.records[-1].d_hat != 0.0


class TestModelMismatch:
    @pytest.mark.parametrize("valve_scale", [0.9, 1.1])
    def test_nmpc_tracks_step_down_under_valve_mismatch(self, params, ocp_config, valve_scale):
        scenario = Scenario(valve_coeff_scale=valve_scale)
        trace = run_closed_loop(scenario, get_controller("nmpc", params, ocp_config), params)
        assert not any(rec.failed for rec in trace.records)
        assert abs(trace.levels[-1] - 0.15) <= 5e-3
        assert trace.metrics.constraint_violations == 0

    def test_cold_start_from_closed_valve(self, params, ocp_config):
        scenario = Scenario(
            duration=40.0, reference_schedule=((0.0, 0.15),), initial_level=0.2, initial_input=0.0,
        )
        trace = run_closed_loop(scenario, get_controller("nmpc", params, ocp_config), params)
        assert len(trace.records) == 21
        assert trace.metrics.constraint_violations == 0
        assert np.all(trace.levels > 0.0)

    def test_warm_start_rarely_needs_more_iterations(self, params, ocp_config):
        controller = get_controller("nmpc", params, ocp_config, audit_warm_start=True)
        run_closed_loop(Scenario(), controller, params)
        assert len(controller.audit_log) == 201
        not_worse = sum(warm <= cold for warm, cold in controller.audit_log)
        assert not_worse >= 0.9 * len(controller.audit_log)


class TestAbort:
    def test_overflow_aborts_with_partial_trace(self, params, ocp_config):
        scenario = Scenario(
            duration=40.0, reference_schedule=((0.0, 1.9),), initial_level=1.9,
            initial_input=0.1, valve_coeff_scale=0.1,
        )
        controller = ConstantInflow(params, ocp_config, 0.1, initial_input=0.1)
        with pytest.raises(SimulationAborted) as excinfo:
            run_closed_loop(scenario, controller, params)
        trace = excinfo.value.trace
        assert trace is not None
        assert "overflow" in trace.abort_reason or "left the tank" in trace.abort_reason
        assert 1 <= len(trace.records) < 21

    def test_empty_tank_aborts_by_default(self, params, ocp_config):
        scenario = Scenario(duration=20.0, reference_schedule=((0.0, 0.05),), initial_level=0.05, initial_input=0.0)
        controller = ConstantInflow(params, ocp_config, 0.0, initial_input=0.0)
        with pytest.raises(SimulationAborted):
            run_closed_loop(scenario, controller, params)

    def test_empty_tank_clamped_on_request(self, params, ocp_config):
        scenario = Scenario(
            duration=20.0, reference_schedule=((0.0, 0.05),), initial_level=0.05,
            initial_input=0.0, clamp_empty=True,
        )
        controller = ConstantInflow(params, ocp_config, 0.0, initial_input=0.0)
        trace = run_closed_loop(scenario, controller, params)
        assert len(trace.records) == 11
        assert trace.levels[-1] == 0.0


class TestBatch:
    def test_runs_in_order(self, params, ocp_config):
        scenario = Scenario(duration=20.0, reference_schedule=((0.0, 0.4), (10.0, 0.5)))
        jobs = [SimJob(scenario, get_controller(name, params, ocp_config), params) for name in ("lmpc", "nmpc")]
        traces = run_batch(jobs, max_workers=2)
        assert [t.controller for t in traces] == ["lmpc", "nmpc"]
        sequential = run_closed_loop(scenario, get_controller("nmpc", params, ocp_config), params)
        assert traces[1].comparable() == sequential.comparable()

    def test_shared_controller_rejected(self, params, ocp_config):
        controller = get_controller("lmpc", params, ocp_config)
        job = SimJob(Scenario(duration=10.0), controller, params)
        with pytest.raises(ValueError, match="own controller"):
            run_batch([job, job])

    def test_aborted_job_returns_partial_trace(self, params, ocp_config):
        scenario = Scenario(duration=20.0, reference_schedule=((0.0, 0.05),), initial_level=0.05, initial_input=0.0)
        job = SimJob(scenario, ConstantInflow(params, ocp_config, 0.0, initial_input=0.0), params)
        (trace,) = run_batch([job])
        assert trace.abort_reason
