"""Tracking and constraint metrics for closed-loop traces."""

from dataclasses import dataclass

import numpy as np

SETTLING_BAND = 0.01  # m


@dataclass(frozen=True)
class EventMetrics:
    time: float
    level: float
    direction: str  # "up" or "down"
    undershoot: float
    overshoot: float
    settling_time: float | None


@dataclass(frozen=True)
class Metrics:
    ise: float
    iae: float
    max_undershoot: float
    max_overshoot: float
    constraint_violations: int
    events: tuple[EventMetrics, ...] = ()

    def settling_times(self) -> dict[float, float | None]:
        return {event.time: event.settling_time for event in self.events}


def count_input_violations(inputs, initial_input: float, flow_bounds, rate_bounds) -> int:
    """Exact (no tolerance) count of samples breaking the flow box or rate bounds.

    The increment u - previous is compared with the rate bounds directly.
    """
    q_lo, q_hi = flow_bounds
    d_lo, d_hi = rate_bounds
    count = 0
    previous = initial_input
    for u in inputs:
        if u < q_lo or u > q_hi or not d_lo <= u - previous <= d_hi:
            count += 1
        previous = u
    return count


def _settling(times: np.ndarray, error: np.ndarray) -> float | None:
    outside = np.flatnonzero(np.abs(error) >= SETTLING_BAND)
    if outside.size == 0:
        return 0.0
    first_inside = outside[-1] + 1
    if first_inside >= times.size:
        return None
    return float(times[first_inside] - times[0])


def compute_metrics(trace) -> Metrics:
    """Metrics of a SimTrace; step events come from its reference schedule."""
    if not trace.records:
        raise ValueError("cannot compute metrics of an empty trace")
    t = trace.times
    h = trace.levels
    r = trace.references
    ts = trace.sample_time
    error = h - r

    schedule = list(trace.reference_schedule)
    events = []
    for index, (event_time, level) in enumerate(schedule):
        if index == 0 or level == schedule[index - 1][1]:
            continue
        end = schedule[index + 1][0] if index + 1 < len(schedule) else np.inf
        window = (t >= event_time) & (t < end)
        if not window.any():
            continue
        h_win = h[window]
        direction = "down" if level < schedule[index - 1][1] else "up"
        undershoot = max(0.0, float(np.max(level - h_win))) if direction == "down" else 0.0
        overshoot = max(0.0, float(np.max(h_win - level))) if direction == "up" else 0.0
        events.append(EventMetrics(
            time=float(event_time),
            level=float(level),
            direction=direction,
            undershoot=undershoot,
            overshoot=overshoot,
            settling_time=_settling(t[window], h_win - level),
        ))

    return Metrics(
        ise=float(np.sum(error ** 2) * ts),
        iae=float(np.sum(np.abs(error)) * ts),
        max_undershoot=max((e.undershoot for e in events), default=0.0),
        max_overshoot=max((e.overshoot for e in events), default=0.0),
        constraint_violations=count_input_violations(
            trace.inputs, trace.initial_input, trace.flow_bounds, trace.rate_bounds
        ),
        events=tuple(events),
    )
