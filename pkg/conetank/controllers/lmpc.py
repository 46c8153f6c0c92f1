"""Linear MPC on the ZOH-discretised model linearised at a fixed level."""

from dataclasses import dataclass

import numpy as np

from ..nmpc_solver import OcpConfig, project_sequence
from ..qp_solver import QuadProgram, solve_qp
from ..tank_model import LinearTankModel, OperatingPoint, TankParams, linearize
from .base import ControlStepInput, Controller, Plan


def lmpc_prediction_matrices(model: LinearTankModel, horizon: int) -> tuple[np.ndarray, np.ndarray]:
    """Stacked predictions x_{1..N} = Phi x_0 + Gamma u_{0..N-1}."""
    if horizon < 1:
        raise ValueError(f"horizon must be >= 1, got {horizon}")
    powers = model.a_disc ** np.arange(horizon + 1)
    phi = powers[1:]
    gamma = np.zeros((horizon, horizon))
    for k in range(horizon):
        gamma[k, : k + 1] = powers[k::-1] * model.b_disc
    return phi, gamma


@dataclass(frozen=True, eq=False)
class LmpcProblem:
    """Deviation-coordinate QP in z = [u_dev (N), slack (N)] plus what is needed to read it back."""

    qp: QuadProgram
    free_output: np.ndarray  # absolute levels with zero input deviation
    gamma: np.ndarray
    input_offset: float


def lmpc_build_qp(
    model: LinearTankModel,
    config: OcpConfig,
    step: ControlStepInput,
    previous_input: float,
    disturbance: float,
) -> LmpcProblem:
    n = config.horizon
    if len(step.reference_preview) != n:
        raise ValueError(f"reference preview has {len(step.reference_preview)} values, expected {n}")
    h_op = model.operating_point.level
    q_op = model.operating_point.inflow
    phi, gamma = lmpc_prediction_matrices(model, n)

    x_0 = step.measured_level - disturbance - h_op
    u_prev = previous_input - q_op
    free_output = h_op + disturbance + phi * x_0
    error = free_output - np.asarray(step.reference_preview)

    diff = np.eye(n) - np.eye(n, k=-1)
    first = np.zeros(n)
    first[0] = u_prev

    hess = np.zeros((2 * n, 2 * n))
    grad = np.zeros(2 * n)
    hess[:n, :n] = 2.0 * (config.weight_x * gamma.T @ gamma + config.weight_du * diff.T @ diff)
    hess[n:, n:] = 2.0 * config.soft_level_penalty * np.eye(n)
    grad[:n] = 2.0 * (config.weight_x * gamma.T @ error - config.weight_du * diff.T @ first)

    zeros = np.zeros((n, n))
    eye = np.eye(n)
    d_lo, d_hi = config.rate_bounds
    h_lo, h_hi = config.level_bounds
    ineq = np.vstack([
        np.hstack([diff, zeros]),
        np.hstack([-diff, zeros]),
        np.hstack([-gamma, -eye]),
        np.hstack([gamma, -eye]),
    ])
    bound = np.concatenate([
        d_hi + first,
        -d_lo - first,
        free_output - h_lo,
        h_hi - free_output,
    ])
    q_lo, q_hi = config.flow_bounds
    lower = np.concatenate([np.full(n, q_lo - q_op), np.zeros(n)])
    upper = np.concatenate([np.full(n, q_hi - q_op), np.full(n, np.inf)])
    qp = QuadProgram(hess, grad, ineq, bound, lower, upper)
    return LmpcProblem(qp=qp, free_output=free_output, gamma=gamma, input_offset=q_op)


class LinearMpcController(Controller):
    name = "lmpc"
    nonlinear_model = False

    def __init__(self, params: TankParams, config: OcpConfig, operating_level: float = 0.4, **kwargs):
        self.model = linearize(params, OperatingPoint.from_level(params, operating_level))
        super().__init__(params, config, operating_level=operating_level, **kwargs)

    def _warm_vector(self, problem: LmpcProblem) -> np.ndarray | None:
        if self._warm is None:
            return None
        cfg = self.config
        inputs = project_sequence(self._warm, self.u_prev, cfg.flow_bounds, cfg.rate_bounds)
        y = problem.free_output + problem.gamma @ (inputs - problem.input_offset)
        h_lo, h_hi = cfg.level_bounds
        slack = np.maximum(0.0, np.maximum(h_lo - y, y - h_hi))
        return np.concatenate([inputs - problem.input_offset, slack])

    def _plan(self, step: ControlStepInput, disturbance: float) -> Plan:
        cfg = self.config
        problem = lmpc_build_qp(self.model, cfg, step, self.u_prev, disturbance)
        solution = solve_qp(problem.qp, warm_start=self._warm_vector(problem), max_iter=cfg.sqp.qp_max_iter)
        n = cfg.horizon
        deviation = solution.z_opt[:n]
        inputs = deviation + problem.input_offset
        outputs = problem.free_output + problem.gamma @ deviation
        error = outputs - np.asarray(step.reference_preview)
        du = np.diff(inputs, prepend=self.u_prev)
        cost = float(cfg.weight_x * error @ error + cfg.weight_du * du @ du)
        return Plan(
            inputs=inputs,
            outputs=outputs,
            cost=cost,
            iterations=solution.iterations,
            kkt_residual=solution.kkt_residual,
            status=solution.status,
            warm_start=np.append(inputs[1:], inputs[-1]),
            active_rows=solution.active_set,
        )

    def _model_prediction(self, model_level: float, applied_input: float) -> float:
        op = self.model.operating_point
        return op.level + float(self.model.predict(model_level - op.level, applied_input - op.inflow))
