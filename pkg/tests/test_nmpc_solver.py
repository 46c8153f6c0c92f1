"""Tests for the nonlinear OCP and its SQP solver."""

import numpy as np
import pytest

from conetank.controllers.base import FAILED_STATUSES
from conetank.errors import DomainError
from conetank.nmpc_solver import (
    LEVEL_FLOOR,
    OcpConfig,
    OcpInstance,
    SqpSettings,
    cost_gradient,
    defects,
    lagrangian_gradient,
    ocp_cost,
    project_sequence,
    rollout,
    sqp_solve,
)
from conetank.qp_solver import SolverStatus
from conetank.tank_model import euler_step


def make_instance(params, horizon, reference, initial_level=0.4, previous_input=None, **overrides):
    from conetank.tank_model import steady_state_flow

    if previous_input is None:
        previous_input = float(steady_state_flow(params, 0.4))
    config = OcpConfig(horizon=horizon, **overrides)
    if np.isscalar(reference):
        reference = (reference,) * horizon
    return OcpInstance(config, params, initial_level, previous_input, tuple(reference))


def grid_cost(params, config, x0, u_prev, inputs, reference):
    """Vectorised cost of input sequences given as a list of arrays."""
    x = x0
    total = 0.0
    prev = u_prev
    for u, r in zip(inputs, reference):
        x = euler_step(params, x, u)
        total = total + config.weight_x * (x - r) ** 2 + config.weight_du * (u - prev) ** 2
        prev = u
    return total


class TestProblemFunctions:
    def test_rollout_has_zero_defects(self, params):
        instance = make_instance(params, 5, 0.5)
        inputs = np.array([0.05, 0.06, 0.07, 0.07, 0.06])
        levels = rollout(params, 0.4, inputs)
        np.testing.assert_allclose(defects(instance, inputs, levels), 0.0, atol=1e-15)

    def test_cost_gradient_matches_finite_differences(self, params):
        instance = make_instance(params, 4, (0.5, 0.55, 0.6, 0.6))
        u = np.array([0.05, 0.07, 0.06, 0.08])
        x = np.array([0.42, 0.47, 0.5, 0.52])
        grad_u, grad_x = cost_gradient(instance, u, x)
        eps = 1e-7
        for k in range(4):
            du = np.zeros(4)
            du[k] = eps
            fd_u = (ocp_cost(instance, u + du, x) - ocp_cost(instance, u - du, x)) / (2 * eps)
            fd_x = (ocp_cost(instance, u, x + du) - ocp_cost(instance, u, x - du)) / (2 * eps)
            assert grad_u[k] == pytest.approx(fd_u, rel=1e-6, abs=1e-9)
            assert grad_x[k] == pytest.approx(fd_x, rel=1e-6, abs=1e-9)

    def test_increment_cost_penalises_chatter(self, params, steady_flow):
        instance = make_instance(params, 2, 0.4)
        levels = np.array([0.4, 0.4])
        assert ocp_cost(instance, [steady_flow + 0.01, steady_flow], levels) > 0.0
        assert ocp_cost(instance, [steady_flow, steady_flow], levels) == 0.0

    def test_project_sequence(self):
        projected = project_sequence([0.1, 0.0, 0.0], 0.05, (0.0, 0.1), (-0.02, 0.02))
        np.testing.assert_allclose(projected, [0.07, 0.05, 0.03])


class TestInstanceValidation:
    def test_reference_length_checked(self, params):
        with pytest.raises(ValueError, match="expected 3"):
            make_instance(params, 3, (0.4, 0.4))

    def test_previous_input_outside_bounds(self, params):
        with pytest.raises(DomainError):
            make_instance(params, 2, 0.4, previous_input=0.2)

    def test_reference_outside_level_bounds(self, params):
        with pytest.raises(DomainError):
            make_instance(params, 2, 0.005)

    @pytest.mark.parametrize("overrides", [
        {"horizon": 0},
        {"rate_bounds": (0.01, 0.02)},
        {"weight_x": 0.0, "weight_du": 0.0},
        {"flow_bounds": (0.1, 0.0)},
    ])
    def test_invalid_config(self, overrides):
        with pytest.raises(ValueError):
            OcpConfig(**overrides)

    def test_invalid_sqp_settings(self):
        with pytest.raises(ValueError):
            SqpSettings(backtrack=1.5)


class TestSqpSolve:
    def test_equilibrium_is_optimal(self, params, steady_flow):
        sol = sqp_solve(make_instance(params, 10, 0.4))
        assert sol.status == SolverStatus.OPTIMAL
        np.testing.assert_allclose(sol.inputs, steady_flow, atol=1e-12)
        assert sol.cost <= 1e-12

    def test_single_step_matches_grid_search(self, params, steady_flow):
        instance = make_instance(params, 1, 0.42)
        sol = sqp_solve(instance)
        assert sol.ok

        grid = np.linspace(steady_flow - 0.02, steady_flow + 0.02, 40001)
        costs = grid_cost(params, instance.config, 0.4, steady_flow, [grid], instance.reference)
        assert sol.inputs[0] == pytest.approx(grid[np.argmin(costs)], abs=1e-5)

    def test_two_steps_match_grid_search(self, params, steady_flow):
        instance = make_instance(params, 2, (0.43, 0.45))
        sol = sqp_solve(instance)
        assert sol.ok

        u0 = np.linspace(steady_flow - 0.02, steady_flow + 0.02, 801)[:, None]
        u1 = u0 + np.linspace(-0.02, 0.02, 801)[None, :]
        u1 = np.clip(u1, 0.0, 0.1)
        costs = grid_cost(params, instance.config, 0.4, steady_flow, [u0, u1], instance.reference)
        i, j = np.unravel_index(np.argmin(costs), costs.shape)
        assert sol.inputs[0] == pytest.approx(u0[i, 0], abs=2e-3)
        assert sol.inputs[1] == pytest.approx(u1[i, j], abs=2e-3)

    def test_interior_solution_is_stationary(self, params):
        instance = make_instance(params, 5, 0.42)
        sol = sqp_solve(instance)
        assert sol.ok
        assert sol.kkt_residual <= 1e-8
        grad_u, grad_x = lagrangian_gradient(instance, sol.inputs, sol.levels, sol.dynamics_multipliers)
        assert np.abs(grad_u).max() <= 1e-6
        assert np.abs(grad_x).max() <= 1e-6
        np.testing.assert_allclose(defects(instance, sol.inputs, sol.levels), 0.0, atol=1e-8)

    def test_large_step_respects_input_constraints(self, params, steady_flow):
        instance = make_instance(params, 10, 0.8)
        sol = sqp_solve(instance)
        assert sol.status in (SolverStatus.OPTIMAL, SolverStatus.ITERATION_LIMIT)
        assert np.all(sol.inputs >= 0.0) and np.all(sol.inputs <= 0.1)
        increments = np.diff(sol.inputs, prepend=steady_flow)
        assert np.all(increments <= 0.02 + 1e-9)
        assert np.all(increments >= -0.02 - 1e-9)
        # the first move is rate limited toward the higher level
        assert sol.inputs[0] == pytest.approx(steady_flow + 0.02, abs=1e-9)

    def test_warm_start_from_solution_converges_immediately(self, params):
        instance = make_instance(params, 5, 0.42)
        cold = sqp_solve(instance)
        warm = sqp_solve(instance, cold)
        assert warm.sqp_iterations == 1
        np.testing.assert_allclose(warm.inputs, cold.inputs, atol=1e-10)

    def test_near_empty_tank_stays_in_domain(self, params):
        instance = make_instance(params, 10, 0.01, initial_level=0.02, previous_input=0.0)
        sol = sqp_solve(instance)
        assert np.all(sol.levels >= LEVEL_FLOOR)
        assert np.all(sol.inputs >= 0.0) and np.all(sol.inputs <= 0.1)

    def test_shifted_warm_start(self, params):
        sol = sqp_solve(make_instance(params, 4, 0.5))
        shifted = sol.shifted(params)
        np.testing.assert_array_equal(shifted.inputs[:3], sol.inputs[1:])
        assert shifted.inputs[3] == sol.inputs[3]
        np.testing.assert_array_equal(shifted.levels[:3], sol.levels[1:])

    def test_output_offset_shifts_tracking(self, params, steady_flow):
        config = OcpConfig(horizon=5)
        instance = OcpInstance(config, params, 0.4, steady_flow, (0.45,) * 5, output_offset=0.05)
        sol = sqp_solve(instance)
        assert sol.ok
        # x + d already equals the reference, so holding the input is optimal
        np.testing.assert_allclose(sol.inputs, steady_flow, atol=1e-10)


class TestReferenceInstances:
    def test_single_step_full_range_grid(self, params, steady_flow):
        config = OcpConfig(horizon=1, weight_du=0.0, rate_bounds=(-0.1, 0.1))
        instance = OcpInstance(config, params, 0.4, steady_flow, (0.5,))
        sol = sqp_solve(instance)
        assert sol.ok

        grid = np.linspace(0.0, 0.1, 100001)
        costs = grid_cost(params, config, 0.4, steady_flow, [grid], instance.reference)
        assert sol.inputs[0] == pytest.approx(grid[np.argmin(costs)], abs=1e-5)

    def test_two_step_rate_limited_grid(self, params, steady_flow):
        config = OcpConfig(horizon=2, weight_du=0.1)
        instance = OcpInstance(config, params, 0.4, steady_flow, (0.6, 0.6))
        sol = sqp_solve(instance)
        assert sol.ok

        u0 = (steady_flow + np.arange(-200, 201) * 1e-4)[:, None]
        u1 = np.clip(u0 + (np.arange(-200, 201) * 1e-4)[None, :], 0.0, 0.1)
        costs = grid_cost(params, config, 0.4, steady_flow, [u0, u1], instance.reference)
        i, j = np.unravel_index(np.argmin(costs), costs.shape)
        assert sol.inputs[0] == pytest.approx(u0[i, 0], abs=2e-3)
        assert sol.inputs[1] == pytest.approx(u1[i, j], abs=2e-3)


class TestSolverProperties:
    @pytest.mark.parametrize("reference,initial_level,previous_input", [
        (0.8, 0.4, None),
        (0.15, 0.2, 0.0),
        (0.3, 1.2, 0.1),
    ])
    def test_merit_never_increases_on_accepted_steps(self, params, reference, initial_level, previous_input):
        instance = make_instance(
            params, 10, reference, initial_level=initial_level, previous_input=previous_input,
        )
        sol = sqp_solve(instance)
        assert sol.merit_history
        for before, after in sol.merit_history:
            assert after <= before

    def test_lagrangian_gradient_matches_finite_differences(self, params):
        rng = np.random.default_rng(2024)
        n = 4
        eps = 1e-6
        for _ in range(20):
            reference = tuple(rng.uniform(0.2, 1.5, n))
            instance = OcpInstance(
                OcpConfig(horizon=n), params, float(rng.uniform(0.2, 1.5)), float(rng.uniform(0.0, 0.1)),
                reference, output_offset=float(rng.uniform(-0.05, 0.05)),
            )
            u = rng.uniform(0.0, 0.1, n)
            x = rng.uniform(0.2, 1.5, n)
            lam = rng.normal(size=n)

            def lagrangian(u_, x_):
                return ocp_cost(instance, u_, x_) + lam @ defects(instance, u_, x_)

            grad_u, grad_x = lagrangian_gradient(instance, u, x, lam)
            for k in range(n):
                step = np.zeros(n)
                step[k] = eps
                fd_u = (lagrangian(u + step, x) - lagrangian(u - step, x)) / (2 * eps)
                fd_x = (lagrangian(u, x + step) - lagrangian(u, x - step)) / (2 * eps)
                assert grad_u[k] == pytest.approx(fd_u, rel=1e-6, abs=1e-8)
                assert grad_x[k] == pytest.approx(fd_x, rel=1e-6, abs=1e-8)

    @pytest.mark.parametrize("scale", [10.0, 100.0])
    def test_weight_scaling_keeps_argmin_and_status(self, params, steady_flow, scale):
        def solve(weight_x, weight_du):
            config = OcpConfig(horizon=10, weight_x=weight_x, weight_du=weight_du)
            return sqp_solve(OcpInstance(config, params, 0.4, steady_flow, (0.6,) * 10))

        base = solve(1.0, 10.0)
        scaled = solve(scale, 10.0 * scale)
        assert base.status == SolverStatus.OPTIMAL
        assert scaled.status == SolverStatus.OPTIMAL
        np.testing.assert_allclose(scaled.inputs, base.inputs, atol=10 * SqpSettings().kkt_tol)


class TestDifficultStarts:
    @pytest.mark.parametrize("initial_level", [0.3, 0.2, 0.15])
    def test_cold_start_from_closed_valve(self, params, initial_level):
        instance = make_instance(params, 10, 0.15, initial_level=initial_level, previous_input=0.0)
        sol = sqp_solve(instance)
        assert sol.status not in FAILED_STATUSES
        assert np.all(sol.inputs >= 0.0) and np.all(sol.inputs <= 0.1)
        assert np.all(np.diff(sol.inputs, prepend=0.0) <= 0.02 + 1e-9)
        assert np.all(np.isfinite(sol.levels))

    def test_large_offset_targets_stay_in_level_bounds(self, params, steady_flow):
        # r - d falls below h_min, so the model-side target is clipped
        config = OcpConfig(horizon=10)
        instance = OcpInstance(config, params, 0.5, steady_flow, (0.15,) * 10, output_offset=0.16)
        sol = sqp_solve(instance)
        assert sol.status not in FAILED_STATUSES
        assert np.all(sol.levels >= LEVEL_FLOOR)
        assert sol.inputs[0] < steady_flow

    def test_factorisation_failure_returns_status(self, params, monkeypatch):
        def broken(*args, **kwargs):
            raise ValueError("QP Hessian is not positive definite")

        monkeypatch.setattr("conetank.nmpc_solver.solve_qp", broken)
        sol = sqp_solve(make_instance(params, 5, 0.5))
        assert sol.status == SolverStatus.NUMERICAL_FAILURE
        assert sol.sqp_iterations == 1
        assert not sol.ok
