"""Conical (inverted frustum) tank: geometry, nonlinear level dynamics,
discretisation, steady states and linearisation.

All quantities are SI. Level functions accept floats or numpy arrays and
evaluate elementwise; domain violations raise ``DomainError``.
"""

from dataclasses import dataclass, field
import logging
import math

import numpy as np

from .errors import DomainError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TankGeometry:
    upper_radius: float = 1.0  # R1 [m]
    bottom_radius: float = 0.4  # R2 [m]
    max_height: float = 2.0  # h_max [m]

    def __post_init__(self):
        if self.upper_radius <= 0 or self.bottom_radius <= 0 or self.max_height <= 0:
            raise DomainError("tank radii and height must be positive")
        if self.upper_radius < self.bottom_radius:
            raise DomainError(
                f"upper radius {self.upper_radius} must not be smaller than "
                f"bottom radius {self.bottom_radius}"
            )

    @property
    def taper(self) -> float:
        """Radius growth per metre of level, (R1 - R2) / h_max."""
        return (self.upper_radius - self.bottom_radius) / self.max_height


@dataclass(frozen=True)
class TankParams:
    geometry: TankGeometry = field(default_factory=TankGeometry)
    valve_coeff: float = 0.075  # k_v [m^2.5/s]
    q_in_min: float = 0.0
    q_in_max: float = 0.1
    sample_time: float = 2.0

    def __post_init__(self):
        if self.valve_coeff <= 0:
            raise DomainError("valve coefficient must be positive")
        if self.sample_time <= 0:
            raise DomainError("sample time must be positive")
        if not 0 <= self.q_in_min < self.q_in_max:
            raise DomainError(
                f"flow bounds must satisfy 0 <= q_in_min < q_in_max, got "
                f"[{self.q_in_min}, {self.q_in_max}]"
            )

    def scaled(self, valve_scale: float) -> "TankParams":
        """Copy with the valve coefficient multiplied by ``valve_scale``."""
        return TankParams(
            geometry=self.geometry,
            valve_coeff=self.valve_coeff * valve_scale,
            q_in_min=self.q_in_min,
            q_in_max=self.q_in_max,
            sample_time=self.sample_time,
        )


@dataclass(frozen=True)
class OperatingPoint:
    level: float
    inflow: float

    def __post_init__(self):
        if self.level <= 0:
            raise DomainError(f"operating level must be positive, got {self.level}")

    @classmethod
    def from_level(cls, params: TankParams, level: float) -> "OperatingPoint":
        return cls(level=float(level), inflow=float(steady_state_flow(params, level)))


@dataclass(frozen=True)
class LinearTankModel:
    """Scalar deviation model x = h - h_L, u = q_in - q_in_L."""

    a_cont: float
    b_cont: float
    a_disc: float
    b_disc: float
    operating_point: OperatingPoint
    sample_time: float

    def predict(self, x, u):
        """One sample of x+ = a_disc * x + b_disc * u."""
        return self.a_disc * x + self.b_disc * u


def _check_level(geometry: TankGeometry, h) -> None:
    arr = np.asarray(h, dtype=float)
    if np.any(np.isnan(arr)) or np.any(arr < 0) or np.any(arr > geometry.max_height):
        raise DomainError(f"level {h} outside [0, {geometry.max_height}] m")


def surface_radius(geometry: TankGeometry, h):
    """Radius of the liquid surface at level ``h``."""
    _check_level(geometry, h)
    return geometry.bottom_radius + geometry.taper * np.asarray(h, dtype=float)[()]


def frustum_volume(geometry: TankGeometry, h):
    """Stored volume, pi*h/3 * (r^2 + R2*r + R2^2)."""
    r = surface_radius(geometry, h)
    r2 = geometry.bottom_radius
    return math.pi * np.asarray(h, dtype=float)[()] / 3.0 * (r * r + r2 * r + r2 * r2)


def frustum_volume_expanded(geometry: TankGeometry, h):
    """Same volume with the surface radius substituted and expanded in h."""
    _check_level(geometry, h)
    h = np.asarray(h, dtype=float)[()]
    r2 = geometry.bottom_radius
    c = geometry.taper
    return math.pi * h / 3.0 * (3 * r2 * r2 + 3 * r2 * c * h + c * c * h * h)


def cross_section(geometry: TankGeometry, h):
    """F(h) = dV/dh = pi * r_f(h)^2."""
    r = surface_radius(geometry, h)
    return math.pi * r * r


def cross_section_slope(geometry: TankGeometry, h):
    """F'(h) = 2*pi*r_f(h)*(R1 - R2)/h_max."""
    return 2.0 * math.pi * surface_radius(geometry, h) * geometry.taper


def outflow(params: TankParams, h):
    """Valve outflow k_v * sqrt(h)."""
    arr = np.asarray(h, dtype=float)
    if np.any(np.isnan(arr)) or np.any(arr < 0):
        raise DomainError(f"outflow undefined for negative level {h}")
    return params.valve_coeff * np.sqrt(arr)[()]


def dynamics_rhs(params: TankParams, h, q_in):
    """Level rate dh/dt = (q_in - k_v*sqrt(h)) / F(h)."""
    area = cross_section(params.geometry, h)
    return (q_in - outflow(params, h)) / area


def euler_step(params: TankParams, h, q_in):
    """Forward-Euler design model h+ = h + T_s * dh/dt."""
    h_next = h + params.sample_time * dynamics_rhs(params, h, q_in)
    if np.any(np.asarray(h_next) < 0):
        raise DomainError(f"Euler step from level {h} with inflow {q_in} empties the tank")
    return h_next


def dynamics_jacobian(params: TankParams, h, q_in):
    """Analytic partial derivatives (d rhs/dh, d rhs/dq_in)."""
    arr = np.asarray(h, dtype=float)
    if np.any(arr <= 0):
        raise DomainError(f"Jacobian undefined at level {h} <= 0")
    area = cross_section(params.geometry, h)
    slope = cross_section_slope(params.geometry, h)
    sqrt_h = np.sqrt(arr)[()]
    residual = q_in - params.valve_coeff * sqrt_h
    d_dh = (-params.valve_coeff / (2.0 * sqrt_h) * area - residual * slope) / (area * area)
    d_dq = 1.0 / area
    return d_dh, d_dq


def steady_state_flow(params: TankParams, level):
    """Inflow that holds ``level`` constant."""
    arr = np.asarray(level, dtype=float)
    if np.any(arr <= 0) or np.any(arr > params.geometry.max_height):
        raise DomainError(f"steady level {level} outside (0, {params.geometry.max_height}] m")
    return outflow(params, level)


def steady_state_level(params: TankParams, flow):
    """Level at which the outflow equals ``flow``."""
    q_top = params.valve_coeff * math.sqrt(params.geometry.max_height)
    arr = np.asarray(flow, dtype=float)
    if np.any(arr <= 0) or np.any(arr > q_top):
        raise DomainError(f"steady flow {flow} outside (0, {q_top:.6g}] m^3/s")
    return (arr / params.valve_coeff)[()] ** 2


def linearize(params: TankParams, op_point: OperatingPoint) -> LinearTankModel:
    """First-order Taylor model around an equilibrium, discretised by exact ZOH."""
    if op_point.level > params.geometry.max_height:
        raise DomainError(f"operating level {op_point.level} above tank height")
    imbalance = op_point.inflow - params.valve_coeff * math.sqrt(op_point.level)
    if abs(imbalance) > 1e-9:
        raise DomainError(
            f"operating point ({op_point.level}, {op_point.inflow}) is not an equilibrium "
            f"(flow imbalance {imbalance:.3e} m^3/s)"
        )
    a_cont, b_cont = dynamics_jacobian(params, op_point.level, op_point.inflow)
    a_cont, b_cont = float(a_cont), float(b_cont)
    ts = params.sample_time
    # a_cont < 0 always, so the ZOH integral is well defined
    b_disc = math.expm1(a_cont * ts) / a_cont * b_cont
    return LinearTankModel(
        a_cont=a_cont,
        b_cont=b_cont,
        a_disc=math.exp(a_cont * ts),
        b_disc=b_disc,
        operating_point=op_point,
        sample_time=ts,
    )


def rk4_step(params: TankParams, h, q_in, dt: float):
    """Classical fourth-order Runge-Kutta step with q_in held over ``dt``."""
    k1 = dynamics_rhs(params, h, q_in)
    k2 = dynamics_rhs(params, h + 0.5 * dt * k1, q_in)
    k3 = dynamics_rhs(params, h + 0.5 * dt * k2, q_in)
    k4 = dynamics_rhs(params, h + dt * k3, q_in)
    h_next = h + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    if np.any(np.asarray(h_next) < 0):
        raise DomainError(f"RK4 step from level {h} with inflow {q_in} empties the tank")
    return h_next


def rk4_integrate(params: TankParams, h, q_in, duration: float, substeps: int, clamp_empty: bool = False):
    """Hold ``q_in`` for ``duration`` seconds using ``substeps`` RK4 steps.

    With ``clamp_empty`` a substep that would drain the tank sets the level to
    0 and integration continues; otherwise the DomainError propagates. Steps
    leaving through the top always raise.
    """
    if substeps < 1:
        raise ValueError("substeps must be >= 1")
    dt = duration / substeps
    for _ in range(substeps):
        try:
            h = rk4_step(params, h, q_in, dt)
        except DomainError:
            if not clamp_empty or np.any(np.asarray(h) >= 0.5 * params.geometry.max_height):
                raise
            logger.warning("RK4 substep from level %s drained the tank, clamping at 0", h)
            h = 0.0
    return h
