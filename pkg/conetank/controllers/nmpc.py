"""Nonlinear MPC: SQP on the Euler design model with an output-offset estimate."""

import logging

import numpy as np

from ..nmpc_solver import OcpConfig, OcpInstance, sqp_solve
from ..tank_model import TankParams, dynamics_rhs
from .base import ControlStepInput, Controller, Plan

logger = logging.getLogger(__name__)


class NonlinearMpcController(Controller):
    name = "nmpc"
    nonlinear_model = True

    def __init__(self, params: TankParams, config: OcpConfig, audit_warm_start: bool = False, **kwargs):
        self.audit_warm_start = audit_warm_start
        self.warm_iterations = 0
        self.cold_iterations = 0
        self.audit_log: list[tuple[int, int]] = []  # (warm, cold) SQP iterations per step
        super().__init__(params, config, **kwargs)

    def _plan(self, step: ControlStepInput, disturbance: float) -> Plan:
        h_max = self.params.geometry.max_height
        instance = OcpInstance(
            config=self.config,
            params=self.params,
            initial_level=min(max(step.measured_level - disturbance, 0.0), h_max),
            previous_input=self.u_prev,
            reference=step.reference_preview,
            output_offset=disturbance,
        )
        solution = sqp_solve(instance, self._warm)
        if self.audit_warm_start:
            cold = sqp_solve(instance)
            self.warm_iterations += solution.sqp_iterations
            self.cold_iterations += cold.sqp_iterations
            self.audit_log.append((solution.sqp_iterations, cold.sqp_iterations))
            logger.debug(
                "t=%.1f s: warm start %d SQP iterations, cold start %d",
                step.time, solution.sqp_iterations, cold.sqp_iterations,
            )
        return Plan(
            inputs=solution.inputs,
            outputs=solution.levels + disturbance,
            cost=solution.cost,
            iterations=solution.sqp_iterations,
            kkt_residual=solution.kkt_residual,
            status=solution.status,
            warm_start=solution.shifted(self.params),
            active_rows=solution.active_set,
        )

    def _model_prediction(self, model_level: float, applied_input: float) -> float:
        h_max = self.params.geometry.max_height
        level = min(max(model_level, 0.0), h_max)
        step = level + self.params.sample_time * float(dynamics_rhs(self.params, level, applied_input))
        return float(np.clip(step, 0.0, h_max))
