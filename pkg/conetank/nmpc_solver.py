"""Nonlinear optimal control problem for the tank and its SQP solver.

The problem over a horizon of N samples is

    min   sum_k  Q_x (x_{k+1} + d - r_k)^2 + Q_u (u_k - u_{k-1})^2
    s.t.  x_{k+1} = x_k + T_s * rhs(x_k, u_k)          (Euler model)
          h_min <= x_k + d <= h_max                    (softened)
          q_min <= u_k <= q_max
          dq_min <= u_k - u_{k-1} <= dq_max
          x_0, u_{-1} given

where d is the estimated output offset. The increment term carries a plus
sign; a minus sign would reward input chattering and leave the problem
unbounded.

The optimiser works in model coordinates: the tracking target r_k - d and
the soft window for x_k are both kept inside [h_min, h_max], so a large
offset estimate never pushes the design model toward an empty tank.

States and inputs are both decision variables. Each SQP iteration
linearises the dynamics, eliminates the state step through the linearised
recursion (defects included) and hands the remaining inequality QP in the
input step and level slacks to ``qp_solver``. A Gauss-Newton Hessian is used
and steps are globalised by Armijo backtracking on an l1 merit function.
"""

from dataclasses import dataclass, field
import logging

import numpy as np

from .errors import DomainError
from .qp_solver import QuadProgram, SolverStatus, solve_qp
from .tank_model import TankParams, cross_section, dynamics_jacobian, dynamics_rhs, euler_step

logger = logging.getLogger(__name__)

# iterates closer to the empty tank than this are rejected by the line search
LEVEL_FLOOR = 1e-6
# cold-start levels are seeded no lower than this
SEED_FLOOR = 1e-2
# a stalled line search still returns its iterate when the model defect is below this
STALL_DEFECT_TOL = 1e-4


@dataclass(frozen=True)
class SqpSettings:
    max_iter: int = 50
    kkt_tol: float = 1e-8
    merit_penalty: float = 1.0
    armijo_c: float = 1e-4
    backtrack: float = 0.5
    min_step: float = 1e-10
    qp_max_iter: int = 500

    def __post_init__(self):
        if self.max_iter < 1 or self.qp_max_iter < 1:
            raise ValueError("iteration limits must be >= 1")
        if self.kkt_tol <= 0 or self.merit_penalty <= 0 or self.min_step <= 0:
            raise ValueError("SQP tolerances and merit penalty must be positive")
        if not 0 < self.armijo_c < 1 or not 0 < self.backtrack < 1:
            raise ValueError("Armijo constant and backtracking factor must lie in (0, 1)")


@dataclass(frozen=True)
class OcpConfig:
    horizon: int = 10
    weight_x: float = 1.0
    weight_du: float = 10.0
    level_bounds: tuple[float, float] = (0.01, 2.0)
    flow_bounds: tuple[float, float] = (0.0, 0.1)
    rate_bounds: tuple[float, float] = (-0.02, 0.02)
    soft_level_penalty: float = 1e4
    sqp: SqpSettings = field(default_factory=SqpSettings)

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError(f"horizon must be >= 1, got {self.horizon}")
        if self.weight_x < 0 or self.weight_du < 0:
            raise ValueError("weights must be non-negative")
        if self.weight_x == 0 and self.weight_du == 0:
            raise ValueError("at least one of weight_x, weight_du must be positive")
        for name in ("level_bounds", "flow_bounds", "rate_bounds"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name} lower bound {lo} exceeds upper bound {hi}")
        if self.level_bounds[0] < 0:
            raise ValueError("level_bounds must be non-negative")
        if not self.rate_bounds[0] <= 0 <= self.rate_bounds[1]:
            raise ValueError("rate_bounds must contain zero so that holding the input is feasible")
        if self.soft_level_penalty <= 0:
            raise ValueError("soft_level_penalty must be positive")


@dataclass(frozen=True)
class OcpInstance:
    config: OcpConfig
    params: TankParams
    initial_level: float
    previous_input: float
    reference: tuple[float, ...]
    output_offset: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "reference", tuple(float(r) for r in self.reference))
        cfg = self.config
        if len(self.reference) != cfg.horizon:
            raise ValueError(f"reference preview has {len(self.reference)} values, expected {cfg.horizon}")
        if not 0 <= self.initial_level <= self.params.geometry.max_height:
            raise DomainError(f"initial level {self.initial_level} outside the tank")
        q_lo, q_hi = cfg.flow_bounds
        if not q_lo <= self.previous_input <= q_hi:
            raise DomainError(f"previous input {self.previous_input} outside [{q_lo}, {q_hi}]")
        h_lo, h_hi = cfg.level_bounds
        if any(r < h_lo or r > h_hi for r in self.reference):
            raise DomainError(f"reference values must lie in [{h_lo}, {h_hi}]")


@dataclass(frozen=True, eq=False)
class OcpSolution:
    inputs: np.ndarray
    levels: np.ndarray
    cost: float
    sqp_iterations: int
    kkt_residual: float
    status: SolverStatus
    dynamics_multipliers: np.ndarray | None = None
    # (merit before, merit after) of each accepted step under that step's penalty
    merit_history: tuple[tuple[float, float], ...] = ()
    active_set: tuple[int, ...] = ()

    @property
    def ok(self) -> bool:
        return self.status == SolverStatus.OPTIMAL

    def shifted(self, params: TankParams) -> "OcpSolution":
        """Warm start for the next sample: drop the first move, repeat the last."""
        inputs = np.append(self.inputs[1:], self.inputs[-1])
        tail = float(np.clip(self.levels[-1], 0.0, params.geometry.max_height))
        last = _clamped_euler(params, tail, float(self.inputs[-1]))
        levels = np.append(self.levels[1:], last)
        return OcpSolution(inputs, levels, self.cost, 0, self.kkt_residual, self.status)


def _clamped_euler(params: TankParams, h: float, q: float, floor: float = LEVEL_FLOOR) -> float:
    step = h + params.sample_time * float(dynamics_rhs(params, h, q))
    return float(np.clip(step, floor, params.geometry.max_height))


def rollout(params: TankParams, x_0: float, inputs) -> np.ndarray:
    """Chain Euler steps from ``x_0``; returns x_1..x_N."""
    levels = []
    x = x_0
    for u in np.asarray(inputs, dtype=float).reshape(-1):
        x = euler_step(params, x, u)
        levels.append(x)
    return np.asarray(levels, dtype=float)


def _checked(instance: OcpInstance, inputs, levels) -> tuple[np.ndarray, np.ndarray]:
    u = np.asarray(inputs, dtype=float).reshape(-1)
    x = np.asarray(levels, dtype=float).reshape(-1)
    n = instance.config.horizon
    if u.size != n or x.size != n:
        raise ValueError(f"expected {n} inputs and levels, got {u.size} and {x.size}")
    return u, x


def _increments(instance: OcpInstance, u: np.ndarray) -> np.ndarray:
    return np.diff(u, prepend=instance.previous_input)


def tracking_target(instance: OcpInstance) -> np.ndarray:
    """Model-coordinate targets r_k - d, clipped to the level bounds."""
    lo, hi = instance.config.level_bounds
    return np.clip(np.asarray(instance.reference) - instance.output_offset, lo, hi)


def level_limits(instance: OcpInstance) -> tuple[float, float]:
    """Soft window for the model level x: both x and x + d inside the level bounds."""
    lo, hi = instance.config.level_bounds
    d = instance.output_offset
    lower = max(lo, lo - d)
    return lower, max(min(hi, hi - d), lower)


def ocp_cost(instance: OcpInstance, inputs, levels) -> float:
    """Tracking plus input-increment cost of a candidate (inputs, x_1..x_N).

    With no output offset the tracking term is sum Q_x (x_{k+1} - r_k)^2.
    """
    u, x = _checked(instance, inputs, levels)
    cfg = instance.config
    error = x - tracking_target(instance)
    du = _increments(instance, u)
    return float(cfg.weight_x * error @ error + cfg.weight_du * du @ du)


def cost_gradient(instance: OcpInstance, inputs, levels) -> tuple[np.ndarray, np.ndarray]:
    """Gradient of ``ocp_cost`` with respect to (inputs, levels)."""
    u, x = _checked(instance, inputs, levels)
    cfg = instance.config
    error = x - tracking_target(instance)
    du = _increments(instance, u)
    # D' du for the first-difference operator D
    grad_u = 2.0 * cfg.weight_du * (du - np.append(du[1:], 0.0))
    grad_x = 2.0 * cfg.weight_x * error
    return grad_u, grad_x


def _level_violation(instance: OcpInstance, x: np.ndarray) -> np.ndarray:
    lo, hi = level_limits(instance)
    return np.maximum(0.0, lo - x) - np.maximum(0.0, x - hi)


def _soft_penalty(instance: OcpInstance, x: np.ndarray) -> float:
    v = _level_violation(instance, x)
    return float(instance.config.soft_level_penalty * v @ v)


def defects(instance: OcpInstance, inputs, levels) -> np.ndarray:
    """Dynamics residuals c_k = x_{k+1} - x_k - T_s * rhs(x_k, u_k)."""
    u, x = _checked(instance, inputs, levels)
    prev = np.concatenate([[instance.initial_level], x[:-1]])
    return x - prev - instance.params.sample_time * dynamics_rhs(instance.params, prev, u)


def _linearization(instance: OcpInstance, u: np.ndarray, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-stage a_k = d phi/dx_k and b_k = d phi/du_k of the Euler map phi."""
    ts = instance.params.sample_time
    prev = np.concatenate([[instance.initial_level], x[:-1]])
    a = np.zeros_like(u)
    b = np.empty_like(u)
    # x_0 is fixed, so its state derivative is never used and may be singular
    b[0] = ts / float(cross_section(instance.params.geometry, prev[0]))
    if u.size > 1:
        d_dh, d_dq = dynamics_jacobian(instance.params, prev[1:], u[1:])
        a[1:] = 1.0 + ts * np.asarray(d_dh)
        b[1:] = ts * np.asarray(d_dq)
    return a, b


def lagrangian_gradient(instance: OcpInstance, inputs, levels, multipliers) -> tuple[np.ndarray, np.ndarray]:
    """Gradient of ocp_cost + sum_k lambda_k c_k with respect to (inputs, levels)."""
    u, x = _checked(instance, inputs, levels)
    lam = np.asarray(multipliers, dtype=float).reshape(-1)
    a, b = _linearization(instance, u, x)
    grad_u, grad_x = cost_gradient(instance, u, x)
    grad_u = grad_u - b * lam
    grad_x = grad_x + lam
    grad_x[:-1] -= a[1:] * lam[1:]
    return grad_u, grad_x


def _merit(instance: OcpInstance, u: np.ndarray, x: np.ndarray, rho: float) -> float:
    if np.any(x < LEVEL_FLOOR) or np.any(x > instance.params.geometry.max_height):
        return np.inf
    try:
        c = defects(instance, u, x)
    except DomainError:
        return np.inf
    return ocp_cost(instance, u, x) + _soft_penalty(instance, x) + rho * float(np.abs(c).sum())


def project_sequence(inputs, previous_input: float, flow_bounds, rate_bounds) -> np.ndarray:
    """Project an input sequence onto the flow box and rate limits, stage by stage."""
    q_lo, q_hi = flow_bounds
    d_lo, d_hi = rate_bounds
    values = np.asarray(inputs, dtype=float)
    out = np.empty_like(values)
    prev = float(previous_input)
    for k, value in enumerate(values):
        value = min(max(value, prev + d_lo), prev + d_hi)
        out[k] = min(max(value, q_lo), q_hi)
        prev = out[k]
    return out


def _feasible_inputs(instance: OcpInstance, inputs: np.ndarray) -> np.ndarray:
    cfg = instance.config
    return project_sequence(inputs, instance.previous_input, cfg.flow_bounds, cfg.rate_bounds)


def _initial_iterate(instance: OcpInstance, guess: OcpSolution | None) -> tuple[np.ndarray, np.ndarray]:
    n = instance.config.horizon
    if guess is not None and guess.inputs.size == n and guess.levels.size == n:
        u = _feasible_inputs(instance, np.asarray(guess.inputs, dtype=float))
        x = np.clip(np.asarray(guess.levels, dtype=float), LEVEL_FLOOR, instance.params.geometry.max_height)
        return u, x
    # cold rollout is clamped to the soft level window, not the domain floor
    floor = max(level_limits(instance)[0], SEED_FLOOR)
    u = np.full(n, float(instance.previous_input))
    x = np.empty(n)
    level = float(instance.initial_level)
    for k in range(n):
        level = _clamped_euler(instance.params, level, u[k], floor)
        x[k] = level
    return u, x


def _build_subproblem(instance, u, x, a, b, c):
    """Condensed QP in z = [du (N), slack (N)]; returns (qp, M, m)."""
    cfg = instance.config
    n = cfg.horizon
    sens = np.zeros((n, n))
    offset = np.zeros(n)
    for k in range(n):
        if k > 0:
            sens[k] = a[k] * sens[k - 1]
            offset[k] = a[k] * offset[k - 1]
        sens[k, k] += b[k]
        offset[k] -= c[k]

    diff = np.eye(n) - np.eye(n, k=-1)
    du = _increments(instance, u)
    error = x - tracking_target(instance)

    hess = np.zeros((2 * n, 2 * n))
    grad = np.zeros(2 * n)
    hess[:n, :n] = 2.0 * (cfg.weight_x * sens.T @ sens + cfg.weight_du * diff.T @ diff)
    hess[n:, n:] = 2.0 * cfg.soft_level_penalty * np.eye(n)
    grad[:n] = 2.0 * (cfg.weight_x * sens.T @ (error + offset) + cfg.weight_du * diff.T @ du)

    zeros = np.zeros((n, n))
    eye = np.eye(n)
    d_lo, d_hi = cfg.rate_bounds
    x_lo, x_hi = level_limits(instance)
    ineq = np.vstack([
        np.hstack([diff, zeros]),
        np.hstack([-diff, zeros]),
        np.hstack([-sens, -eye]),
        np.hstack([sens, -eye]),
    ])
    bound = np.concatenate([
        d_hi - du,
        du - d_lo,
        x + offset - x_lo,
        x_hi - x - offset,
    ])
    q_lo, q_hi = cfg.flow_bounds
    lower = np.concatenate([q_lo - u, np.zeros(n)])
    upper = np.concatenate([q_hi - u, np.full(n, np.inf)])
    qp = QuadProgram(hess, grad, ineq, bound, lower, upper)
    return qp, sens, offset


def _dynamics_multipliers(instance, a, x_step, x, qp_solution) -> np.ndarray:
    """Adjoint recursion for the linearised-dynamics multipliers."""
    cfg = instance.config
    n = cfg.horizon
    error = x - tracking_target(instance)
    lam_rows = qp_solution.ineq_multipliers
    mu_lo = lam_rows[2 * n:3 * n]
    mu_hi = lam_rows[3 * n:4 * n]
    forcing = 2.0 * cfg.weight_x * (error + x_step) + mu_hi - mu_lo
    lam = np.zeros(n)
    lam[-1] = -forcing[-1]
    for k in range(n - 2, -1, -1):
        lam[k] = a[k + 1] * lam[k + 1] - forcing[k]
    return lam


def sqp_solve(instance: OcpInstance, initial_guess: OcpSolution | None = None) -> OcpSolution:
    """Solve the nonlinear OCP by Gauss-Newton SQP with an l1-merit line search.

    Never raises on numerical trouble: a subproblem that cannot be built or
    factorised ends the solve with ``NUMERICAL_FAILURE``.
    """
    settings = instance.config.sqp
    u, x = _initial_iterate(instance, initial_guess)
    rho = settings.merit_penalty
    lam = np.zeros(instance.config.horizon)
    history: list[tuple[float, float]] = []
    residual = np.inf
    active: tuple[int, ...] = ()

    def result(status: SolverStatus, iterations: int) -> OcpSolution:
        q_lo, q_hi = instance.config.flow_bounds
        inputs = np.clip(u, q_lo, q_hi)
        return OcpSolution(
            inputs=inputs,
            levels=x.copy(),
            cost=ocp_cost(instance, inputs, x),
            sqp_iterations=iterations,
            kkt_residual=float(residual),
            status=status,
            dynamics_multipliers=lam.copy(),
            merit_history=tuple(history),
            active_set=active,
        )

    for iteration in range(1, settings.max_iter + 1):
        try:
            c = defects(instance, u, x)
            a, b = _linearization(instance, u, x)
            qp, sens, offset = _build_subproblem(instance, u, x, a, b, c)

            lo, hi = level_limits(instance)
            x_lin = x + offset
            slack0 = np.maximum(0.0, np.maximum(lo - x_lin, x_lin - hi))
            qp_sol = solve_qp(
                qp,
                warm_start=np.concatenate([np.zeros_like(u), slack0]),
                tol=min(1e-8, settings.kkt_tol),
                max_iter=settings.qp_max_iter,
            )
        except (ValueError, np.linalg.LinAlgError) as exc:
            logger.warning("SQP iteration %d: subproblem failed: %s", iteration, exc)
            return result(SolverStatus.NUMERICAL_FAILURE, iteration)
        if qp_sol.status not in (SolverStatus.OPTIMAL, SolverStatus.INACCURATE):
            logger.warning("SQP iteration %d: QP subproblem returned %s", iteration, qp_sol.status.value)
            return result(qp_sol.status, iteration)

        n = u.size
        du = qp_sol.z_opt[:n]
        dx = sens @ du + offset
        active = qp_sol.active_set
        lam = _dynamics_multipliers(instance, a, dx, x, qp_sol)
        rho = max(rho, 2.0 * float(np.abs(lam).max(initial=0.0)))

        defect = float(np.abs(c).max(initial=0.0))
        # input step length, invariant under scaling of the weights
        stationarity = float(np.abs(du).max(initial=0.0))
        residual = max(defect, stationarity)
        merit = _merit(instance, u, x, rho)
        logger.debug(
            "SQP iter %d: merit=%.6e defect=%.3e stationarity=%.3e rho=%.3g qp_iters=%d",
            iteration, merit, defect, stationarity, rho, qp_sol.iterations,
        )
        if residual <= settings.kkt_tol:
            return result(SolverStatus.OPTIMAL, iteration)

        grad_u, grad_x = cost_gradient(instance, u, x)
        grad_x = grad_x - 2.0 * instance.config.soft_level_penalty * _level_violation(instance, x)
        slope = float(grad_u @ du + grad_x @ dx) - rho * float(np.abs(c).sum())

        alpha = 1.0
        while alpha >= settings.min_step:
            trial_u = u + alpha * du
            trial_x = x + alpha * dx
            trial = _merit(instance, trial_u, trial_x, rho)
            if trial <= merit + settings.armijo_c * alpha * min(slope, 0.0):
                history.append((merit, trial))
                u, x = trial_u, trial_x
                break
            alpha *= settings.backtrack
        else:
            if defect <= STALL_DEFECT_TOL:
                logger.warning(
                    "SQP line search stalled at iteration %d (residual %.3e), keeping the last iterate",
                    iteration, residual,
                )
                return result(SolverStatus.INACCURATE, iteration)
            logger.warning("SQP line search failed at iteration %d (residual %.3e)", iteration, residual)
            return result(SolverStatus.LINE_SEARCH_FAILED, iteration)

    logger.warning("SQP hit the iteration limit (%d), residual %.3e", settings.max_iter, residual)
    return result(SolverStatus.ITERATION_LIMIT, settings.max_iter)
