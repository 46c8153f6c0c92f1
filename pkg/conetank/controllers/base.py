"""Receding-horizon controller interface shared by LMPC and NMPC."""

from abc import ABC, abstractmethod
from dataclasses import dataclass, replace
import logging
import math
import time

import numpy as np

from ..errors import DomainError
from ..nmpc_solver import OcpConfig
from ..qp_solver import SolverStatus
from ..tank_model import TankParams, steady_state_flow
from .estimator import EstimatorState, estimator_update

logger = logging.getLogger(__name__)

# statuses whose plan is discarded in favour of holding the last input
FAILED_STATUSES = frozenset({
    SolverStatus.INFEASIBLE, SolverStatus.LINE_SEARCH_FAILED, SolverStatus.NUMERICAL_FAILURE,
})
BOUND_TOL = 1e-12


@dataclass(frozen=True)
class ControlStepInput:
    measured_level: float
    reference_preview: tuple[float, ...]
    time: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "reference_preview", tuple(float(r) for r in self.reference_preview))


@dataclass(frozen=True)
class ControllerDiagnostics:
    solve_time: float
    iterations: int
    cost: float
    kkt_residual: float
    status: str
    active_constraint_flags: tuple[str, ...] = ()
    disturbance_estimate: float = 0.0
    failed: bool = False


@dataclass(frozen=True, eq=False)
class Plan:
    """Optimizer output in absolute units."""

    inputs: np.ndarray
    outputs: np.ndarray
    cost: float
    iterations: int
    kkt_residual: float
    status: SolverStatus
    warm_start: object = None
    active_rows: tuple[int, ...] = ()  # active general rows of the last QP


def rate_window(previous_input: float, rate_bounds: tuple[float, float]) -> tuple[float, float]:
    """Admissible interval for the next input given the increment limits."""
    return previous_input + rate_bounds[0], previous_input + rate_bounds[1]


def project_input(value: float, previous_input: float, config: OcpConfig) -> float:
    """Clip onto the rate window, then onto the flow box.

    ``previous_input + bound`` can round outward, so the result is nudged
    toward ``previous_input`` one ulp at a time until the increment itself
    lies inside the rate bounds. The previous input lies in the box and the
    rate bounds contain zero, so both sets of bounds then hold exactly.
    """
    lo, hi = rate_window(previous_input, config.rate_bounds)
    value = min(max(float(value), lo), hi)
    q_lo, q_hi = config.flow_bounds
    value = min(max(value, q_lo), q_hi)
    d_lo, d_hi = config.rate_bounds
    while not d_lo <= value - previous_input <= d_hi:
        value = float(np.nextafter(value, previous_input))
    return value


class Controller(ABC):
    """Stateful receding-horizon controller; one owner, no concurrent calls."""

    name: str = "base"
    nonlinear_model: bool = False

    def __init__(
        self,
        params: TankParams,
        config: OcpConfig,
        operating_level: float = 0.4,
        estimator_gain: float = 0.5,
        initial_input: float | None = None,
    ):
        self.params = params
        self.config = config
        self.operating_level = operating_level
        self.estimator_gain = estimator_gain
        self.reset(initial_input)

    def reset(self, initial_input: float | None = None) -> None:
        """Forget warm start and estimator history."""
        if initial_input is None:
            initial_input = float(steady_state_flow(self.params, self.operating_level))
        q_lo, q_hi = self.config.flow_bounds
        if not q_lo <= initial_input <= q_hi:
            raise DomainError(f"initial input {initial_input} outside [{q_lo}, {q_hi}]")
        self.u_prev = float(initial_input)
        self.estimator = EstimatorState(gain=self.estimator_gain)
        self._warm = None

    @abstractmethod
    def _plan(self, step: ControlStepInput, disturbance: float) -> Plan:
        """Solve the horizon problem for the current sample."""

    @abstractmethod
    def _model_prediction(self, model_level: float, applied_input: float) -> float:
        """Design-model level one sample ahead, without the disturbance."""

    def control_step(self, step: ControlStepInput) -> tuple[float, ControllerDiagnostics]:
        if len(step.reference_preview) != self.config.horizon:
            raise ValueError(
                f"reference preview has {len(step.reference_preview)} values, "
                f"expected {self.config.horizon}"
            )
        started = time.perf_counter()
        max_level = self.params.geometry.max_height

        estimator = self.estimator
        if estimator.last_prediction is not None:
            estimator = estimator_update(estimator, step.measured_level, estimator.last_prediction, max_level)
        disturbance = estimator.disturbance

        try:
            plan = self._plan(step, disturbance)
        except (ValueError, ArithmeticError, np.linalg.LinAlgError) as exc:
            # DomainError is a ValueError
            logger.warning("%s: t=%.1f s, problem rejected: %s", self.name, step.time, exc)
            plan = None

        failed = plan is None or plan.status in FAILED_STATUSES
        if failed:
            if plan is not None:
                logger.warning("%s: t=%.1f s, solver status %s, holding input", self.name, step.time, plan.status.value)
            u_star = self.u_prev
            self._warm = None
        else:
            u_star = project_input(plan.inputs[0], self.u_prev, self.config)
            self._warm = plan.warm_start

        flags = self._active_flags(u_star, plan)
        model_level = step.measured_level - disturbance
        self.estimator = replace(estimator, last_prediction=self._model_prediction(model_level, u_star))
        self.u_prev = u_star

        diagnostics = ControllerDiagnostics(
            solve_time=time.perf_counter() - started,
            iterations=plan.iterations if plan is not None else 0,
            cost=plan.cost if plan is not None else float("nan"),
            kkt_residual=plan.kkt_residual if plan is not None else float("inf"),
            status=plan.status.value if plan is not None else "rejected",
            active_constraint_flags=flags,
            disturbance_estimate=disturbance,
            failed=failed,
        )
        return u_star, diagnostics

    def _active_flags(self, u_star: float, plan: Plan | None) -> tuple[str, ...]:
        flags = []
        q_lo, q_hi = self.config.flow_bounds
        r_lo, r_hi = rate_window(self.u_prev, self.config.rate_bounds)
        if math.isclose(u_star, q_lo, abs_tol=BOUND_TOL):
            flags.append("flow_min")
        if math.isclose(u_star, q_hi, abs_tol=BOUND_TOL):
            flags.append("flow_max")
        if math.isclose(u_star, r_lo, abs_tol=BOUND_TOL) and self.config.rate_bounds[0] < 0:
            flags.append("rate_min")
        if math.isclose(u_star, r_hi, abs_tol=BOUND_TOL) and self.config.rate_bounds[1] > 0:
            flags.append("rate_max")
        # both QPs stack 2N rate rows ahead of 2N soft level rows
        if plan is not None and any(row >= 2 * self.config.horizon for row in plan.active_rows):
            flags.append("level_soft")
        return tuple(flags)
