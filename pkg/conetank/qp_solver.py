"""Dense primal active-set solver for small strictly convex QPs.

    minimise    1/2 z'Hz + f'z
    subject to  G z <= g,   lower <= z <= upper

Box bounds may be infinite. The solver returns multipliers for every
constraint so callers can certify optimality with ``check_kkt``.
"""

from dataclasses import dataclass, field
from enum import Enum
import logging

import numpy as np
import scipy.linalg
from scipy.optimize import linprog

logger = logging.getLogger(__name__)


class SolverStatus(str, Enum):
    OPTIMAL = "optimal"
    INFEASIBLE = "infeasible"
    ITERATION_LIMIT = "iteration_limit"
    INACCURATE = "inaccurate"
    LINE_SEARCH_FAILED = "line_search_failed"
    NUMERICAL_FAILURE = "numerical_failure"


@dataclass(frozen=True, eq=False)
class QuadProgram:
    hessian: np.ndarray
    gradient: np.ndarray
    ineq_matrix: np.ndarray | None = None
    ineq_bound: np.ndarray | None = None
    lower: np.ndarray | None = None
    upper: np.ndarray | None = None

    def __post_init__(self):
        h = np.atleast_2d(np.asarray(self.hessian, dtype=float))
        f = np.asarray(self.gradient, dtype=float).reshape(-1)
        n = f.size
        if h.shape != (n, n):
            raise ValueError(f"Hessian shape {h.shape} does not match gradient length {n}")
        if not np.allclose(h, h.T, rtol=0.0, atol=1e-12 * max(1.0, np.abs(h).max())):
            raise ValueError("Hessian is not symmetric")
        if self.ineq_matrix is None:
            g_mat = np.zeros((0, n))
            g_vec = np.zeros(0)
        else:
            g_mat = np.atleast_2d(np.asarray(self.ineq_matrix, dtype=float))
            g_vec = np.asarray(self.ineq_bound, dtype=float).reshape(-1)
            if g_mat.shape[1] != n or g_mat.shape[0] != g_vec.size:
                raise ValueError(
                    f"inequality shapes {g_mat.shape} / {g_vec.shape} inconsistent with n={n}"
                )
        lower = np.full(n, -np.inf) if self.lower is None else np.asarray(self.lower, dtype=float).reshape(-1)
        upper = np.full(n, np.inf) if self.upper is None else np.asarray(self.upper, dtype=float).reshape(-1)
        if lower.size != n or upper.size != n:
            raise ValueError("box bound length does not match problem size")
        if np.any(lower > upper):
            raise ValueError("box lower bound exceeds upper bound")
        object.__setattr__(self, "hessian", h)
        object.__setattr__(self, "gradient", f)
        object.__setattr__(self, "ineq_matrix", g_mat)
        object.__setattr__(self, "ineq_bound", g_vec)
        object.__setattr__(self, "lower", lower)
        object.__setattr__(self, "upper", upper)

    @property
    def n(self) -> int:
        return self.gradient.size

    @property
    def m(self) -> int:
        return self.ineq_bound.size

    def objective(self, z: np.ndarray) -> float:
        return float(0.5 * z @ self.hessian @ z + self.gradient @ z)

    def stacked_constraints(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """All constraints as A z <= b.

        Returns (A, b, kind) where kind[i] is 0 for a general row, 1 for a
        lower bound and 2 for an upper bound. Infinite bounds are dropped.
        """
        eye = np.eye(self.n)
        lo = np.isfinite(self.lower)
        up = np.isfinite(self.upper)
        a = np.vstack([self.ineq_matrix, -eye[lo], eye[up]])
        b = np.concatenate([self.ineq_bound, -self.lower[lo], self.upper[up]])
        kind = np.concatenate([np.zeros(self.m, int), np.ones(lo.sum(), int), np.full(up.sum(), 2)])
        return a, b, kind


@dataclass(frozen=True, eq=False)
class QpSolution:
    z_opt: np.ndarray
    ineq_multipliers: np.ndarray
    lower_multipliers: np.ndarray
    upper_multipliers: np.ndarray
    objective_value: float
    status: SolverStatus
    iterations: int
    kkt_residual: float = float("nan")
    active_set: tuple[int, ...] = field(default_factory=tuple)

    @property
    def ok(self) -> bool:
        return self.status == SolverStatus.OPTIMAL


def check_kkt(problem: QuadProgram, solution: QpSolution) -> float:
    """Largest of the stationarity, primal, dual and complementarity residuals."""
    z = np.asarray(solution.z_opt, dtype=float)
    lam = np.asarray(solution.ineq_multipliers, dtype=float)
    mu_lo = np.asarray(solution.lower_multipliers, dtype=float)
    mu_up = np.asarray(solution.upper_multipliers, dtype=float)
    if z.size != problem.n or lam.size != problem.m or mu_lo.size != problem.n or mu_up.size != problem.n:
        raise ValueError("solution dimensions do not match the problem")

    stationarity = problem.hessian @ z + problem.gradient + problem.ineq_matrix.T @ lam - mu_lo + mu_up
    residuals = [np.abs(stationarity).max(initial=0.0)]

    slack = problem.ineq_bound - problem.ineq_matrix @ z
    residuals.append(np.maximum(0.0, -slack).max(initial=0.0))
    residuals.append(np.maximum(0.0, problem.lower - z).max(initial=0.0))
    residuals.append(np.maximum(0.0, z - problem.upper).max(initial=0.0))

    residuals.append(np.maximum(0.0, -np.concatenate([lam, mu_lo, mu_up])).max(initial=0.0))

    residuals.append(np.abs(lam * slack).max(initial=0.0))
    lo = np.isfinite(problem.lower)
    up = np.isfinite(problem.upper)
    residuals.append(np.abs(mu_lo[lo] * (z[lo] - problem.lower[lo])).max(initial=0.0))
    residuals.append(np.abs(mu_up[up] * (problem.upper[up] - z[up])).max(initial=0.0))
    # a multiplier on an infinite bound can never be complementary
    residuals.append(np.abs(mu_lo[~lo]).max(initial=0.0))
    residuals.append(np.abs(mu_up[~up]).max(initial=0.0))
    return float(max(residuals))


def _phase_one(a: np.ndarray, b: np.ndarray, n: int, tol: float) -> np.ndarray | None:
    """Minimise the largest violation t of A z - t <= b; None if t* > tol."""
    if a.shape[0] == 0:
        return np.zeros(n)
    cost = np.zeros(n + 1)
    cost[-1] = 1.0
    a_ub = np.hstack([a, -np.ones((a.shape[0], 1))])
    bounds = [(None, None)] * n + [(0.0, None)]
    result = linprog(
        cost, A_ub=a_ub, b_ub=b, bounds=bounds, method="highs",
        options={"primal_feasibility_tolerance": 1e-10},
    )
    if result.status != 0 or result.x[-1] > tol:
        return None
    return result.x[:n]


def _unpack(problem: QuadProgram, kind: np.ndarray, multipliers: np.ndarray):
    lam = multipliers[kind == 0]
    mu_lo = np.zeros(problem.n)
    mu_up = np.zeros(problem.n)
    mu_lo[np.isfinite(problem.lower)] = multipliers[kind == 1]
    mu_up[np.isfinite(problem.upper)] = multipliers[kind == 2]
    return lam, mu_lo, mu_up


def solve_qp(
    problem: QuadProgram,
    warm_start: np.ndarray | None = None,
    tol: float = 1e-8,
    max_iter: int = 500,
) -> QpSolution:
    """Primal active-set method (working set grown by blocking constraints,
    shrunk by the most negative multiplier)."""
    if tol <= 0:
        raise ValueError("tol must be positive")
    n = problem.n
    h_mat, f = problem.hessian, problem.gradient
    a, b, kind = problem.stacked_constraints()
    total = a.shape[0]

    try:
        scipy.linalg.cho_factor(h_mat)
    except np.linalg.LinAlgError as exc:
        raise ValueError("QP Hessian is not positive definite") from exc

    def failed(status: SolverStatus, z: np.ndarray, iterations: int) -> QpSolution:
        lam, mu_lo, mu_up = _unpack(problem, kind, np.zeros(total))
        return QpSolution(z, lam, mu_lo, mu_up, problem.objective(z), status, iterations, float("inf"))

    feas_tol = 0.1 * tol
    z = None
    if warm_start is not None:
        candidate = np.asarray(warm_start, dtype=float).reshape(-1)
        if candidate.size != n:
            raise ValueError(f"warm start has length {candidate.size}, expected {n}")
        if np.all(a @ candidate <= b + feas_tol):
            z = candidate.copy()
    if z is None:
        clipped = np.clip(np.zeros(n), problem.lower, problem.upper)
        if np.all(a @ clipped <= b + feas_tol):
            z = clipped
        else:
            z = _phase_one(a, b, n, feas_tol)
            if z is None:
                logger.debug("QP phase one found no feasible point")
                return failed(SolverStatus.INFEASIBLE, np.clip(np.zeros(n), problem.lower, problem.upper), 0)

    working: list[int] = []
    multipliers = np.zeros(total)
    objective = problem.objective(z)
    status = SolverStatus.ITERATION_LIMIT
    iterations = 0

    for iterations in range(1, max_iter + 1):
        grad = h_mat @ z + f
        a_w = a[working]
        k = len(working)
        kkt = np.block([[h_mat, a_w.T], [a_w, np.zeros((k, k))]])
        rhs = np.concatenate([-grad, np.zeros(k)])
        try:
            sol = scipy.linalg.solve(kkt, rhs, assume_a="sym")
        except np.linalg.LinAlgError:
            sol = np.linalg.lstsq(kkt, rhs, rcond=None)[0]
        step = sol[:n]
        lam_w = sol[n:]

        if np.abs(step).max(initial=0.0) <= 1e-12 * (1.0 + np.abs(z).max(initial=0.0)):
            if k == 0 or lam_w.min() >= -tol:
                multipliers = np.zeros(total)
                multipliers[working] = np.maximum(lam_w, 0.0)
                status = SolverStatus.OPTIMAL
                break
            drop = int(np.argmin(lam_w))
            working.pop(drop)
            continue

        alpha = 1.0
        blocking = None
        ap = a @ step
        for i in np.flatnonzero(ap > 1e-14):
            if i in working:
                continue
            ratio = max(0.0, (b[i] - a[i] @ z) / ap[i])
            if ratio < alpha:
                alpha = ratio
                blocking = int(i)
        z = z + alpha * step
        if blocking is not None:
            working.append(blocking)

        new_objective = problem.objective(z)
        assert new_objective <= objective + 1e-9 * (1.0 + abs(objective)), "active-set objective increased"
        objective = new_objective

    lam, mu_lo, mu_up = _unpack(problem, kind, multipliers)
    solution = QpSolution(z, lam, mu_lo, mu_up, problem.objective(z), status, iterations)
    residual = check_kkt(problem, solution)
    if status == SolverStatus.OPTIMAL and residual > tol:
        logger.debug("QP active set converged but KKT residual %.3e exceeds tol %.1e", residual, tol)
        status = SolverStatus.INACCURATE
    active = tuple(int(i) for i in working if kind[i] == 0)
    return QpSolution(z, lam, mu_lo, mu_up, solution.objective_value, status, iterations, residual, active)
