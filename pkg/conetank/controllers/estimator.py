"""Output-disturbance observer closing the model/plant gap."""

from dataclasses import dataclass, replace
import math


@dataclass(frozen=True)
class EstimatorState:
    disturbance: float = 0.0
    gain: float = 0.5
    last_prediction: float | None = None

    def __post_init__(self):
        # gain 0 freezes the estimate (ablation)
        if not 0.0 <= self.gain <= 1.0:
            raise ValueError(f"estimator gain must lie in [0, 1], got {self.gain}")


def estimator_update(
    state: EstimatorState,
    measured_level: float,
    model_prediction: float,
    max_level: float = math.inf,
) -> EstimatorState:
    """d+ = d + L * (h_m - h_model - d), clamped to |d| <= max_level."""
    innovation = measured_level - model_prediction - state.disturbance
    disturbance = state.disturbance + state.gain * innovation
    disturbance = min(max(disturbance, -max_level), max_level)
    return replace(state, disturbance=disturbance)
