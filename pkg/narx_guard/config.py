"""Experiment configuration: JSON schema, cross-field checks and shipped presets."""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any

import voluptuous as vol

from .const import (
    CONF_ARCHITECTURE,
    CONF_COMPARE_STEPS,
    CONF_DETECTION,
    CONF_FAULT,
    CONF_INITIAL_STATE,
    CONF_NAME,
    CONF_OBJECTIVE,
    CONF_OUTPUT_DIR,
    CONF_P_BAR,
    CONF_PLANT,
    CONF_REFERENCE_RATE,
    CONF_SCENARIOS,
    CONF_SEED,
    CONF_SIGMA_V,
    CONF_STEPS,
    CONF_SYSTEM,
    CONF_TRAINING,
    CONF_TRAJECTORIES,
    CONF_USE_INTERVAL_BOUNDS,
    CONF_WINDOW,
    CONF_WORKERS,
    DEFAULT_COMPARE_STEPS,
    DEFAULT_DETECTION_STEPS,
    FAULT_DRAIN_BLOCKAGE,
    FAULT_KINDS,
    FAULT_NONE,
    FAULT_SENSOR_BIAS,
    FAULT_VIBRATION,
    OBJECTIVE_AUTO,
    OBJECTIVE_CHOICES,
    SYSTEM_BEAM,
    SYSTEM_TANKS,
    SYSTEMS,
)
from .exceptions import ConfigError, NarxGuardError
from .models import BeamSliderParams, FaultSpec, TrainingConfig, TwoTankParams
from .storage import config_hash

_LOGGER = logging.getLogger(__name__)

STATE_DIM = 2

DEFAULT_INITIAL_STATE = {SYSTEM_BEAM: (1.0, -1.0), SYSTEM_TANKS: (10.0, 10.0)}

SYSTEM_FAULTS = {
    SYSTEM_BEAM: (FAULT_NONE, FAULT_VIBRATION, FAULT_SENSOR_BIAS),
    SYSTEM_TANKS: (FAULT_NONE, FAULT_DRAIN_BLOCKAGE),
}

_POSITIVE_FLOAT = vol.All(vol.Coerce(float), vol.Range(min=0.0, min_included=False))
_COUNT = vol.All(int, vol.Range(min=1))

PLANT_SCHEMA = vol.Schema(
    {
        vol.Optional("contraction"): vol.Coerce(float),
        vol.Optional("beta"): vol.Coerce(float),
        vol.Optional("vibration_recursive"): bool,
        vol.Optional("q_in"): _POSITIVE_FLOAT,
        vol.Optional("discharge"): _POSITIVE_FLOAT,
        vol.Optional("drain_area"): _POSITIVE_FLOAT,
        vol.Optional("g"): _POSITIVE_FLOAT,
        vol.Optional("dt"): _POSITIVE_FLOAT,
        vol.Optional("substeps"): _COUNT,
    }
)

TRAINING_SCHEMA = vol.Schema(
    {
        vol.Optional("epochs"): _COUNT,
        vol.Optional("batch_size"): _COUNT,
        vol.Optional("learning_rate"): _POSITIVE_FLOAT,
        vol.Optional("momentum"): vol.All(vol.Coerce(float), vol.Range(min=0.0, max=1.0)),
        vol.Optional("seed"): vol.All(int, vol.Range(min=0)),
        vol.Optional("validation_split"): vol.Coerce(float),
        vol.Optional(CONF_TRAJECTORIES, default=50): _COUNT,
        vol.Optional(CONF_STEPS, default=100): _COUNT,
    }
)

DETECTION_SCHEMA = vol.Schema(
    {
        vol.Optional(CONF_STEPS, default=DEFAULT_DETECTION_STEPS): _COUNT,
        vol.Optional(CONF_INITIAL_STATE): [vol.Coerce(float)],
        vol.Optional(CONF_SEED, default=1): vol.All(int, vol.Range(min=0)),
        vol.Optional(CONF_WORKERS, default=1): _COUNT,
    }
)

SCENARIO_SCHEMA = vol.Schema(
    {
        vol.Required(CONF_NAME): str,
        vol.Optional(CONF_FAULT, default={}): {
            vol.Optional("kind", default=FAULT_NONE): vol.In(FAULT_KINDS),
            vol.Optional("magnitude", default=0.0): vol.Coerce(float),
            vol.Optional("onset", default=0): vol.All(int, vol.Range(min=0)),
        },
        vol.Optional(CONF_REFERENCE_RATE, default=None): vol.Any(None, vol.Coerce(float)),
    }
)

EXPERIMENT_SCHEMA = vol.Schema(
    {
        vol.Required(CONF_NAME): str,
        vol.Required(CONF_SYSTEM): vol.In(SYSTEMS),
        vol.Optional(CONF_PLANT, default={}): PLANT_SCHEMA,
        vol.Required(CONF_WINDOW): vol.All(int, vol.Range(min=0)),
        vol.Required(CONF_P_BAR): vol.All(
            vol.Coerce(float), vol.Range(min=0.0, max=1.0, min_included=False, max_included=False)
        ),
        vol.Required(CONF_SIGMA_V): [[vol.Coerce(float)]],
        vol.Required(CONF_ARCHITECTURE): vol.All([_COUNT], vol.Length(min=1)),
        vol.Optional(CONF_TRAINING, default={}): TRAINING_SCHEMA,
        vol.Optional(CONF_DETECTION, default={}): DETECTION_SCHEMA,
        vol.Optional(CONF_SCENARIOS, default=[{CONF_NAME: "normal"}]): vol.All(
            [SCENARIO_SCHEMA], vol.Length(min=1)
        ),
        vol.Optional(CONF_OBJECTIVE, default=OBJECTIVE_AUTO): vol.In(OBJECTIVE_CHOICES),
        vol.Optional(CONF_USE_INTERVAL_BOUNDS, default=False): bool,
        vol.Optional(CONF_COMPARE_STEPS, default=DEFAULT_COMPARE_STEPS): _COUNT,
        vol.Optional(CONF_OUTPUT_DIR): str,
    }
)


@dataclass(frozen=True)
class Scenario:
    """One detection run: a fault and the reference alarm rate it is compared against."""

    name: str
    fault: FaultSpec
    reference_rate: float | None = None


@dataclass(frozen=True)
class ExperimentConfig:
    """Validated experiment settings."""

    name: str
    system: str
    plant: BeamSliderParams | TwoTankParams
    window: int
    p_bar: float
    sigma_v: tuple[tuple[float, ...], ...]
    hidden: tuple[int, ...]
    training: TrainingConfig
    n_trajectories: int
    train_steps: int
    detection_steps: int
    initial_state: tuple[float, ...]
    detection_seed: int
    workers: int
    scenarios: tuple[Scenario, ...]
    objective: str = OBJECTIVE_AUTO
    use_interval_bounds: bool = False
    compare_steps: int = DEFAULT_COMPARE_STEPS
    output_dir: str | None = None
    raw: dict[str, Any] = field(default_factory=dict, compare=False, repr=False)

    @property
    def p(self) -> int:
        """Return the measurement dimension."""
        return len(self.sigma_v)

    @property
    def arch(self) -> list[int]:
        """Return [p (N + 1), hidden..., p]."""
        return [self.p * (self.window + 1), *self.hidden, self.p]

    @property
    def config_hash(self) -> str:
        """Return the sha256 of the validated config."""
        return config_hash(self.raw)

    def scenario(self, name: str) -> Scenario:
        """Return the scenario called ``name``."""
        for scenario in self.scenarios:
            if scenario.name == name:
                return scenario
        available = [s.name for s in self.scenarios]
        raise ConfigError(f"unknown scenario {name!r}; available: {available}")


def _plant(system: str, sigma_v: tuple[tuple[float, ...], ...], data: dict[str, Any]) -> Any:
    beam_keys = {"contraction", "beta", "vibration_recursive"}
    if system == SYSTEM_BEAM:
        unknown = set(data) - beam_keys
        if unknown:
            raise ConfigError(f"plant keys {sorted(unknown)} do not apply to the beam system")
        return BeamSliderParams(sigma_v=sigma_v, **data)
    if set(data) & beam_keys:
        raise ConfigError(f"plant keys {sorted(set(data) & beam_keys)} do not apply to tanks")
    return TwoTankParams(sigma_v=sigma_v, **data)


def validate_config(data: Any) -> ExperimentConfig:
    """Validate a config dictionary and run every cross-field check."""
    try:
        parsed = EXPERIMENT_SCHEMA(data)
    except vol.Invalid as err:
        path = ".".join(str(part) for part in err.path)
        raise ConfigError(f"{path}: {err.msg}" if path else err.msg) from err

    system = parsed[CONF_SYSTEM]
    window = parsed[CONF_WINDOW]
    sigma_v = tuple(tuple(row) for row in parsed[CONF_SIGMA_V])
    if len(sigma_v) != STATE_DIM or any(len(row) != STATE_DIM for row in sigma_v):
        raise ConfigError(f"sigma_v must be {STATE_DIM}x{STATE_DIM} for the {system} system")

    training = dict(parsed[CONF_TRAINING])
    n_trajectories = training.pop(CONF_TRAJECTORIES)
    train_steps = training.pop(CONF_STEPS)
    if train_steps < window + 2:
        raise ConfigError(f"training.steps must be at least window + 2 = {window + 2}")

    detection = parsed[CONF_DETECTION]
    steps = detection[CONF_STEPS]
    if steps < window + 2:
        raise ConfigError(f"detection.steps must be at least window + 2 = {window + 2}")
    initial = tuple(detection.get(CONF_INITIAL_STATE, DEFAULT_INITIAL_STATE[system]))
    if len(initial) != STATE_DIM:
        raise ConfigError(f"detection.initial_state must have {STATE_DIM} entries")

    scenarios = []
    names: set[str] = set()
    for entry in parsed[CONF_SCENARIOS]:
        name = entry[CONF_NAME]
        if name in names:
            raise ConfigError(f"duplicate scenario name {name!r}")
        names.add(name)
        fault_data = entry[CONF_FAULT]
        if fault_data["kind"] not in SYSTEM_FAULTS[system]:
            raise ConfigError(
                f"scenario {name!r}: fault {fault_data['kind']!r} does not apply to {system}"
            )
        if fault_data["onset"] >= steps:
            raise ConfigError(f"scenario {name!r}: fault onset is past the detection horizon")
        try:
            fault = FaultSpec.parse(fault_data)
        except NarxGuardError as err:
            raise ConfigError(f"scenario {name!r}: {err}") from err
        scenarios.append(Scenario(name, fault, entry[CONF_REFERENCE_RATE]))

    try:
        plant = _plant(system, sigma_v, parsed[CONF_PLANT])
        training_cfg = TrainingConfig(**training)
    except NarxGuardError as err:
        raise ConfigError(str(err)) from err

    return ExperimentConfig(
        name=parsed[CONF_NAME],
        system=system,
        plant=plant,
        window=window,
        p_bar=parsed[CONF_P_BAR],
        sigma_v=sigma_v,
        hidden=tuple(parsed[CONF_ARCHITECTURE]),
        training=training_cfg,
        n_trajectories=n_trajectories,
        train_steps=train_steps,
        detection_steps=steps,
        initial_state=initial,
        detection_seed=detection[CONF_SEED],
        workers=detection[CONF_WORKERS],
        scenarios=tuple(scenarios),
        objective=parsed[CONF_OBJECTIVE],
        use_interval_bounds=parsed[CONF_USE_INTERVAL_BOUNDS],
        compare_steps=parsed[CONF_COMPARE_STEPS],
        output_dir=parsed.get(CONF_OUTPUT_DIR),
        raw=parsed,
    )


def load_config(path: str | os.PathLike[str]) -> ExperimentConfig:
    """Read and validate a JSON experiment config."""
    try:
        with open(path, encoding="utf-8") as handle:
            data = json.load(handle)
    except FileNotFoundError as err:
        raise ConfigError(f"config file {path} does not exist") from err
    except json.JSONDecodeError as err:
        raise ConfigError(f"config file {path} is not valid JSON: {err}") from err
    cfg = validate_config(data)
    _LOGGER.debug("Loaded config %s (%s)", cfg.name, cfg.config_hash[:12])
    return cfg


def preset_path(name: str) -> Path:
    """Return the path of a shipped preset (``beam`` or ``tanks``)."""
    path = Path(str(resources.files("narx_guard") / "presets" / f"{name}.json"))
    if not path.is_file():
        raise ConfigError(f"no preset called {name!r}")
    return path


def resolve_config(source: str) -> ExperimentConfig:
    """Load a config from a file path or a preset name."""
    if os.path.exists(source):
        return load_config(source)
    return load_config(preset_path(source))
