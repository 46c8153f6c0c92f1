"""Controller registry and factory."""

from typing import Type

from ..nmpc_solver import OcpConfig
from ..tank_model import TankParams
from .base import Controller, ControllerDiagnostics, ControlStepInput, project_input, rate_window
from .estimator import EstimatorState, estimator_update
from .lmpc import LinearMpcController, lmpc_build_qp, lmpc_prediction_matrices
from .nmpc import NonlinearMpcController


# Registry of available controllers
CONTROLLERS: dict[str, Type[Controller]] = {
    "lmpc": LinearMpcController,
    "nmpc": NonlinearMpcController,
}

# Aliases for convenience
CONTROLLER_ALIASES: dict[str, str] = {
    "linear": "lmpc",
    "mpc": "lmpc",
    "nonlinear": "nmpc",
    "sqp": "nmpc",
}


def resolve_controller_name(name: str) -> str:
    """Canonical registry key for ``name``; raises ValueError if unknown."""
    resolved = CONTROLLER_ALIASES.get(name.lower(), name.lower())
    if resolved not in CONTROLLERS:
        available = list(CONTROLLERS.keys())
        raise ValueError(f"Unknown controller: {name}. Available controllers: {available}")
    return resolved


def get_controller(name: str, params: TankParams, config: OcpConfig, **kwargs) -> Controller:
    """
    Build a controller by name.

    Args:
        name: Controller name (lmpc, nmpc) or alias
        params: Tank parameters of the design model
        config: Horizon, weights and bounds
        **kwargs: Passed to the controller (operating_level, estimator_gain, initial_input)

    Raises:
        ValueError: If the controller name is unknown
    """
    return CONTROLLERS[resolve_controller_name(name)](params, config, **kwargs)


def list_controllers() -> list[tuple[str, bool]]:
    """(name, uses nonlinear design model) for every registered controller."""
    return [(name, cls.nonlinear_model) for name, cls in CONTROLLERS.items()]


__all__ = [
    "CONTROLLERS",
    "CONTROLLER_ALIASES",
    "Controller",
    "ControllerDiagnostics",
    "ControlStepInput",
    "EstimatorState",
    "LinearMpcController",
    "NonlinearMpcController",
    "estimator_update",
    "get_controller",
    "list_controllers",
    "lmpc_build_qp",
    "lmpc_prediction_matrices",
    "project_input",
    "rate_window",
    "resolve_controller_name",
]
