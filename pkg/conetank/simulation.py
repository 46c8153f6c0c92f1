"""Closed-loop experiment: RK4 plant truth driven by a sampled controller."""

from bisect import bisect_right
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields
import logging
import math
from pathlib import Path

import numpy as np
import pandas as pd

from .controllers.base import ControlStepInput, Controller
from .errors import DomainError, SimulationAborted
from .metrics import Metrics, compute_metrics
from .tank_model import TankParams, rk4_integrate, steady_state_flow

logger = logging.getLogger(__name__)

TRACE_COLUMNS = [
    "t", "h_ref", "h_plant", "u", "du", "d_hat", "cost", "sqp_iters", "kkt_residual", "solve_time_s",
]


@dataclass(frozen=True)
class Scenario:
    duration: float = 400.0
    reference_schedule: tuple[tuple[float, float], ...] = ((0.0, 0.4), (50.0, 0.8), (350.0, 0.15))
    initial_level: float = 0.4
    initial_input: float | None = None  # None: steady inflow at initial_level
    plant_substeps: int = 10
    valve_coeff_scale: float = 1.0
    measurement_noise: float = 0.0
    preview: bool = True
    clamp_empty: bool = False

    def __post_init__(self):
        schedule = tuple((float(t), float(level)) for t, level in self.reference_schedule)
        object.__setattr__(self, "reference_schedule", schedule)
        if self.duration <= 0:
            raise ValueError("duration must be positive")
        if not schedule:
            raise ValueError("reference schedule must not be empty")
        times = [t for t, _ in schedule]
        if times[0] != 0.0:
            raise ValueError("reference schedule must start at t = 0")
        if any(b <= a for a, b in zip(times, times[1:])):
            raise ValueError("reference schedule times must be strictly increasing")
        if times[-1] > self.duration:
            raise ValueError("reference schedule extends past the scenario duration")
        if any(level < 0 for _, level in schedule) or self.initial_level < 0:
            raise ValueError("levels must be non-negative")
        if self.plant_substeps < 1:
            raise ValueError("plant_substeps must be >= 1")
        if self.valve_coeff_scale <= 0:
            raise ValueError("valve_coeff_scale must be positive")
        if self.measurement_noise < 0:
            raise ValueError("measurement_noise must be non-negative")

    def reference_at(self, t: float) -> float:
        """Scheduled reference in force at time ``t``."""
        times = [event for event, _ in self.reference_schedule]
        index = max(bisect_right(times, t + 1e-9) - 1, 0)
        return self.reference_schedule[index][1]

    def reference_preview(self, t: float, horizon: int, sample_time: float) -> tuple[float, ...]:
        """r_k aligned with the predicted level x_{k+1}, or the held r(t) without preview."""
        if not self.preview:
            return (self.reference_at(t),) * horizon
        return tuple(self.reference_at(t + (k + 1) * sample_time) for k in range(horizon))


@dataclass(frozen=True)
class StepRecord:
    t: float
    h_ref: float
    h_plant: float
    u: float
    du: float
    d_hat: float
    cost: float
    sqp_iters: int
    kkt_residual: float
    solve_time_s: float
    status: str = "optimal"
    failed: bool = False


@dataclass
class SimTrace:
    controller: str
    sample_time: float
    reference_schedule: tuple[tuple[float, float], ...]
    initial_input: float
    flow_bounds: tuple[float, float]
    rate_bounds: tuple[float, float]
    records: list[StepRecord] = field(default_factory=list)
    abort_reason: str | None = None
    metrics: Metrics | None = None

    @property
    def times(self) -> np.ndarray:
        return np.array([rec.t for rec in self.records])

    @property
    def levels(self) -> np.ndarray:
        return np.array([rec.h_plant for rec in self.records])

    @property
    def references(self) -> np.ndarray:
        return np.array([rec.h_ref for rec in self.records])

    @property
    def inputs(self) -> np.ndarray:
        return np.array([rec.u for rec in self.records])

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            [[getattr(rec, column) for column in TRACE_COLUMNS] for rec in self.records],
            columns=TRACE_COLUMNS,
        )

    def write_csv(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.to_frame().to_csv(path, index=False, float_format="%.9g")
        return path

    def comparable(self) -> list[tuple]:
        """Records without wall-clock timing, for determinism checks."""
        keep = [f.name for f in fields(StepRecord) if f.name != "solve_time_s"]
        return [tuple(getattr(rec, name) for name in keep) for rec in self.records]


def _advance_plant(params: TankParams, scenario: Scenario, h: float, u: float, t: float) -> float:
    """Hold ``u`` for one sample using RK4 substeps."""
    try:
        h = float(rk4_integrate(
            params, h, u, params.sample_time, scenario.plant_substeps, clamp_empty=scenario.clamp_empty,
        ))
    except DomainError as exc:
        raise SimulationAborted(f"plant left the tank after t={t:.1f} s: {exc}") from exc
    if h > params.geometry.max_height:
        raise SimulationAborted(f"tank overflow after t={t:.1f} s (level {h:.6g} m)")
    return h


def run_closed_loop(
    scenario: Scenario,
    controller: Controller,
    params: TankParams,
    seed: int | None = None,
) -> SimTrace:
    """Simulate ``controller`` against the RK4 plant for ``scenario``.

    The controller is reset first, so a reused instance gives the same trace.
    Raises SimulationAborted (with the partial trace) if the level leaves the
    tank.
    """
    if not math.isclose(controller.params.sample_time, params.sample_time):
        raise ValueError(
            f"controller sample time {controller.params.sample_time} s differs from "
            f"plant sample time {params.sample_time} s"
        )
    h_max = params.geometry.max_height
    if scenario.initial_level > h_max or any(level > h_max for _, level in scenario.reference_schedule):
        raise DomainError(f"scenario levels must lie within [0, {h_max}] m")

    plant = params.scaled(scenario.valve_coeff_scale)
    initial_input = scenario.initial_input
    if initial_input is None:
        initial_input = float(steady_state_flow(plant, scenario.initial_level))
    controller.reset(initial_input)

    ts = params.sample_time
    horizon = controller.config.horizon
    steps = int(math.floor(scenario.duration / ts + 1e-9))
    rng = np.random.default_rng(seed)
    trace = SimTrace(
        controller=controller.name,
        sample_time=ts,
        reference_schedule=scenario.reference_schedule,
        initial_input=initial_input,
        flow_bounds=controller.config.flow_bounds,
        rate_bounds=controller.config.rate_bounds,
    )
    logger.info("%s: simulating %.0f s (%d samples)", controller.name, scenario.duration, steps + 1)

    h = float(scenario.initial_level)
    u_prev = initial_input
    for k in range(steps + 1):
        t = k * ts
        measured = h
        if scenario.measurement_noise > 0:
            noise = rng.uniform(-scenario.measurement_noise, scenario.measurement_noise)
            measured = min(max(h + noise, 0.0), h_max)
        step = ControlStepInput(
            measured_level=measured,
            reference_preview=scenario.reference_preview(t, horizon, ts),
            time=t,
        )
        u, diag = controller.control_step(step)
        trace.records.append(StepRecord(
            t=t,
            h_ref=scenario.reference_at(t),
            h_plant=h,
            u=u,
            du=u - u_prev,
            d_hat=diag.disturbance_estimate,
            cost=diag.cost,
            sqp_iters=diag.iterations,
            kkt_residual=diag.kkt_residual,
            solve_time_s=diag.solve_time,
            status=diag.status,
            failed=diag.failed,
        ))
        u_prev = u
        if k == steps:
            break
        try:
            h = _advance_plant(plant, scenario, h, u, t)
        except SimulationAborted as exc:
            trace.abort_reason = exc.reason
            trace.metrics = compute_metrics(trace)
            logger.error("%s: %s", controller.name, exc.reason)
            raise SimulationAborted(exc.reason, trace) from exc

    trace.metrics = compute_metrics(trace)
    logger.info(
        "%s: ISE=%.4g IAE=%.4g violations=%d",
        controller.name, trace.metrics.ise, trace.metrics.iae, trace.metrics.constraint_violations,
    )
    return trace


@dataclass(frozen=True)
class SimJob:
    scenario: Scenario
    controller: Controller
    params: TankParams
    seed: int | None = None


def run_batch(jobs: list[SimJob], max_workers: int | None = None) -> list[SimTrace]:
    """Run independent jobs in a thread pool; aborted runs return their partial trace."""
    controllers = [job.controller for job in jobs]
    if len({id(c) for c in controllers}) != len(controllers):
        raise ValueError("each job needs its own controller instance")

    def run(job: SimJob) -> SimTrace:
        try:
            return run_closed_loop(job.scenario, job.controller, job.params, job.seed)
        except SimulationAborted as exc:
            return exc.trace

    with ThreadPoolExecutor(max_workers=max_workers) as pool:
        return list(pool.map(run, jobs))
