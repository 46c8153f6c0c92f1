"""Run configuration: YAML loading, validation and dumping."""

from dataclasses import asdict, dataclass, field, replace
import os
import re
from pathlib import Path
from typing import Callable, Optional

import yaml

from .errors import ConfigError
from .nmpc_solver import OcpConfig, SqpSettings
from .simulation import Scenario
from .tank_model import TankGeometry, TankParams


DEFAULT_CONFIG_NAME = "default"
CONTROLLER_SECTIONS = ("lmpc", "nmpc")


@dataclass(frozen=True)
class ControllerSettings:
    ocp: OcpConfig = field(default_factory=OcpConfig)
    estimator_gain: float = 0.5


@dataclass(frozen=True)
class RunConfig:
    tank: TankParams = field(default_factory=TankParams)
    operating_level: float = 0.4
    lmpc: ControllerSettings = field(default_factory=ControllerSettings)
    nmpc: ControllerSettings = field(default_factory=ControllerSettings)
    scenario: Scenario = field(default_factory=Scenario)
    output_dir: str = "results"
    seed: int = 0

    def controller(self, name: str) -> ControllerSettings:
        return getattr(self, name)

    def with_horizon(self, horizon: int) -> "RunConfig":
        """Same config with both controllers' horizon overridden."""
        sections = {}
        for name in CONTROLLER_SECTIONS:
            settings = self.controller(name)
            try:
                ocp = replace(settings.ocp, horizon=horizon)
            except ValueError as exc:
                raise ConfigError([f"{name}.horizon: {exc}"]) from exc
            sections[name] = replace(settings, ocp=ocp)
        return replace(self, **sections)


def default_config() -> RunConfig:
    return RunConfig()


def get_project_root() -> Path:
    """Get the project root directory."""
    # Walk up from this file to find the project root
    current = Path(__file__).resolve().parent
    while current != current.parent:
        if (current / "configs" / f"{DEFAULT_CONFIG_NAME}.yaml").exists():
            return current
        current = current.parent
    raise RuntimeError("Could not find project root")


def load_env_file(path: Path) -> dict[str, str]:
    """Load a simple KEY=VALUE .env file."""
    env: dict[str, str] = {}
    if not path.exists():
        return env

    for line in path.read_text().splitlines():
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if stripped.startswith("export "):
            stripped = stripped[len("export "):]
        if "=" not in stripped:
            continue
        key, value = stripped.split("=", 1)
        value = value.strip()
        if len(value) >= 2 and value[0] == value[-1] and value[0] in "\"'":
            value = value[1:-1]
        env[key.strip()] = value
    return env


_ENV_PATTERN = re.compile(r"\$\{([A-Za-z_][A-Za-z0-9_]*)(?::-(.*?))?\}")


def expand_env_vars(value: str, env: dict[str, str]) -> str:
    """Expand ${VAR} and ${VAR:-default} placeholders."""
    def repl(match: re.Match[str]) -> str:
        resolved = env.get(match.group(1))
        if resolved is None or resolved == "":
            return match.group(2) or ""
        return resolved

    return _ENV_PATTERN.sub(repl, value)


def expand_config(value, env: dict[str, str]):
    """Recursively expand env placeholders in config values."""
    if isinstance(value, dict):
        return {k: expand_config(v, env) for k, v in value.items()}
    if isinstance(value, list):
        return [expand_config(v, env) for v in value]
    if isinstance(value, str):
        return expand_env_vars(value, env)
    return value


# --- value coercion -------------------------------------------------------
# Placeholders expand to strings, so every coercer accepts the string form too.

def _as_float(value) -> float:
    if isinstance(value, bool):
        raise ValueError(f"expected a number, got {value!r}")
    try:
        return float(value)
    except (TypeError, ValueError):
        raise ValueError(f"expected a number, got {value!r}") from None


def _as_int(value) -> int:
    if isinstance(value, bool):
        raise ValueError(f"expected an integer, got {value!r}")
    if isinstance(value, int):
        return value
    try:
        return int(str(value).strip())
    except ValueError:
        raise ValueError(f"expected an integer, got {value!r}") from None


def _as_bool(value) -> bool:
    if isinstance(value, bool):
        return value
    text = str(value).strip().lower()
    if text in {"true", "yes", "on", "1"}:
        return True
    if text in {"false", "no", "off", "0"}:
        return False
    raise ValueError(f"expected true/false, got {value!r}")


def _as_pair(value) -> tuple[float, float]:
    if not isinstance(value, (list, tuple)) or len(value) != 2:
        raise ValueError(f"expected a [low, high] pair, got {value!r}")
    return _as_float(value[0]), _as_float(value[1])


def _as_schedule(value) -> tuple[tuple[float, float], ...]:
    if not isinstance(value, (list, tuple)) or not value:
        raise ValueError(f"expected a list of [time, level] events, got {value!r}")
    return tuple(_as_pair(event) for event in value)


def _as_optional_float(value) -> float | None:
    if value is None or (isinstance(value, str) and value.strip().lower() in {"", "null", "none"}):
        return None
    return _as_float(value)


def _as_str(value) -> str:
    if not isinstance(value, str) or not value:
        raise ValueError(f"expected a non-empty string, got {value!r}")
    return value


Coercer = Callable[[object], object]

TANK_KEYS: dict[str, Coercer] = {
    "upper_radius": _as_float,
    "bottom_radius": _as_float,
    "max_height": _as_float,
    "valve_coeff": _as_float,
    "q_in_min": _as_float,
    "q_in_max": _as_float,
    "sample_time": _as_float,
    "operating_level": _as_float,
}

SQP_KEYS: dict[str, Coercer] = {
    "max_iter": _as_int,
    "kkt_tol": _as_float,
    "merit_penalty": _as_float,
    "armijo_c": _as_float,
    "backtrack": _as_float,
    "min_step": _as_float,
    "qp_max_iter": _as_int,
}

CONTROLLER_KEYS: dict[str, Coercer] = {
    "horizon": _as_int,
    "weight_x": _as_float,
    "weight_du": _as_float,
    "level_bounds": _as_pair,
    "flow_bounds": _as_pair,
    "rate_bounds": _as_pair,
    "soft_level_penalty": _as_float,
    "estimator_gain": _as_float,
}

SCENARIO_KEYS: dict[str, Coercer] = {
    "duration": _as_float,
    "reference_schedule": _as_schedule,
    "initial_level": _as_float,
    "initial_input": _as_optional_float,
    "plant_substeps": _as_int,
    "valve_coeff_scale": _as_float,
    "measurement_noise": _as_float,
    "preview": _as_bool,
    "clamp_empty": _as_bool,
}

OUTPUT_KEYS: dict[str, Coercer] = {"directory": _as_str}

TOP_LEVEL_KEYS = {"tank", "lmpc", "nmpc", "scenario", "output", "seed"}


def _coerce_section(
    data: dict, prefix: str, keys: dict[str, Coercer], problems: list[str]
) -> dict:
    """Coerce known keys; unknown keys and bad values become problems."""
    if data is None:
        return {}
    if not isinstance(data, dict):
        problems.append(f"{prefix}: expected a mapping, got {type(data).__name__}")
        return {}
    values = {}
    for key, raw in data.items():
        if key not in keys:
            problems.append(f"{prefix}.{key}: unknown key")
            continue
        try:
            values[key] = keys[key](raw)
        except ValueError as exc:
            problems.append(f"{prefix}.{key}: {exc}")
    return values


def _build(problems: list[str], label: str, factory, **kwargs):
    try:
        return factory(**kwargs)
    except (ValueError, TypeError) as exc:
        problems.append(f"{label}: {exc}")
        return None


def validate_run_config(config: dict) -> tuple[Optional[RunConfig], list[str]]:
    """Build a RunConfig from an expanded mapping; returns (config, problems)."""
    problems: list[str] = []
    if not isinstance(config, dict):
        return None, [f"top level: expected a mapping, got {type(config).__name__}"]
    for key in config:
        if key not in TOP_LEVEL_KEYS:
            problems.append(f"{key}: unknown section")

    tank_values = _coerce_section(config.get("tank"), "tank", TANK_KEYS, problems)
    operating_level = tank_values.pop("operating_level", RunConfig.operating_level)
    geometry_keys = {"upper_radius", "bottom_radius", "max_height"}
    geometry = _build(
        problems, "tank", TankGeometry, **{k: v for k, v in tank_values.items() if k in geometry_keys}
    )
    tank = None
    if geometry is not None:
        tank = _build(
            problems, "tank", TankParams, geometry=geometry,
            **{k: v for k, v in tank_values.items() if k not in geometry_keys},
        )

    controllers = {}
    for name in CONTROLLER_SECTIONS:
        section = config.get(name)
        sqp_raw = None
        if isinstance(section, dict):
            section = dict(section)
            sqp_raw = section.pop("sqp", None)
        sqp_values = _coerce_section(sqp_raw, f"{name}.sqp", SQP_KEYS, problems)
        values = _coerce_section(section, name, CONTROLLER_KEYS, problems)
        gain = values.pop("estimator_gain", ControllerSettings.estimator_gain)
        if not 0.0 <= gain <= 1.0:
            problems.append(f"{name}.estimator_gain: must lie in [0, 1], got {gain}")
        sqp = _build(problems, f"{name}.sqp", SqpSettings, **sqp_values)
        ocp = _build(problems, name, OcpConfig, sqp=sqp or SqpSettings(), **values)
        controllers[name] = ControllerSettings(ocp=ocp, estimator_gain=gain) if ocp else None

    scenario_values = _coerce_section(config.get("scenario"), "scenario", SCENARIO_KEYS, problems)
    scenario = _build(problems, "scenario", Scenario, **scenario_values)

    output_values = _coerce_section(config.get("output"), "output", OUTPUT_KEYS, problems)
    output_dir = output_values.get("directory", RunConfig.output_dir)

    seed = RunConfig.seed
    if "seed" in config:
        try:
            seed = _as_int(config["seed"])
        except ValueError as exc:
            problems.append(f"seed: {exc}")

    if problems or tank is None or scenario is None or None in controllers.values():
        return None, problems

    problems.extend(_cross_checks(tank, operating_level, controllers, scenario))
    if problems:
        return None, problems
    return RunConfig(
        tank=tank,
        operating_level=operating_level,
        lmpc=controllers["lmpc"],
        nmpc=controllers["nmpc"],
        scenario=scenario,
        output_dir=output_dir,
        seed=seed,
    ), []


def _cross_checks(tank: TankParams, operating_level: float, controllers: dict, scenario: Scenario) -> list[str]:
    problems = []
    h_max = tank.geometry.max_height
    if not 0 < operating_level <= h_max:
        problems.append(f"tank.operating_level: must lie in (0, {h_max}], got {operating_level}")
    if not 0 <= scenario.initial_level <= h_max:
        problems.append(f"scenario.initial_level: must lie in [0, {h_max}], got {scenario.initial_level}")
    for name, settings in controllers.items():
        ocp = settings.ocp
        q_lo, q_hi = ocp.flow_bounds
        if q_lo < tank.q_in_min or q_hi > tank.q_in_max:
            problems.append(
                f"{name}.flow_bounds: [{q_lo}, {q_hi}] exceeds the pump range "
                f"[{tank.q_in_min}, {tank.q_in_max}]"
            )
        h_lo, h_hi = ocp.level_bounds
        if h_hi > h_max:
            problems.append(f"{name}.level_bounds: upper bound {h_hi} above tank height {h_max}")
        for t, level in scenario.reference_schedule:
            if not h_lo <= level <= h_hi:
                problems.append(f"scenario.reference_schedule: level {level} at t={t} outside {name}.level_bounds")
        if scenario.initial_input is not None and not q_lo <= scenario.initial_input <= q_hi:
            problems.append(f"scenario.initial_input: {scenario.initial_input} outside {name}.flow_bounds")
    if scenario.initial_input is None and scenario.initial_level == 0:
        problems.append("scenario.initial_input: required when the tank starts empty")
    return problems


def _default_env() -> dict[str, str]:
    try:
        env = load_env_file(get_project_root() / ".env")
    except RuntimeError:
        env = {}
    env.update(os.environ)
    return env


def load_config_text(text: str, env: Optional[dict[str, str]] = None) -> RunConfig:
    """Parse YAML text into a validated RunConfig; raises ConfigError."""
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError([f"YAML parse error: {exc}"]) from exc
    raw = expand_config(raw or {}, _default_env() if env is None else env)
    config, problems = validate_run_config(raw)
    if problems:
        raise ConfigError(problems)
    return config


def load_config(source: str | Path, env: Optional[dict[str, str]] = None) -> RunConfig:
    """Load ``default``, a name under configs/, or a YAML file path."""
    if str(source) == DEFAULT_CONFIG_NAME:
        return default_config()
    path = Path(source)
    if not path.exists() and path.suffix == "" and path.name == str(source):
        try:
            candidate = get_project_root() / "configs" / f"{source}.yaml"
        except RuntimeError:
            candidate = None
        if candidate is not None and candidate.exists():
            path = candidate
    if not path.is_file():
        raise ConfigError([f"config file not found: {source}"])
    return load_config_text(path.read_text(), env)


def config_to_dict(config: RunConfig) -> dict:
    """Plain mapping in the file schema (lists instead of tuples)."""
    def controller(settings: ControllerSettings) -> dict:
        ocp = asdict(settings.ocp)
        sqp = ocp.pop("sqp")
        ocp["level_bounds"] = list(ocp["level_bounds"])
        ocp["flow_bounds"] = list(ocp["flow_bounds"])
        ocp["rate_bounds"] = list(ocp["rate_bounds"])
        ocp["estimator_gain"] = settings.estimator_gain
        ocp["sqp"] = sqp
        return ocp

    tank = asdict(config.tank)
    geometry = tank.pop("geometry")
    scenario = asdict(config.scenario)
    scenario["reference_schedule"] = [list(event) for event in config.scenario.reference_schedule]
    return {
        "tank": {**geometry, **tank, "operating_level": config.operating_level},
        "lmpc": controller(config.lmpc),
        "nmpc": controller(config.nmpc),
        "scenario": scenario,
        "output": {"directory": config.output_dir},
        "seed": config.seed,
    }


def dump_config(config: RunConfig) -> str:
    """YAML text that ``load_config_text`` parses back to an equal RunConfig."""
    return yaml.safe_dump(config_to_dict(config), sort_keys=False, default_flow_style=None)
