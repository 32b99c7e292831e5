"""Tests for experiment configuration."""

from __future__ import annotations

import copy
import json
from pathlib import Path
from typing import Any

import pytest

from narx_guard.config import (
    load_config,
    preset_path,
    resolve_config,
    validate_config,
)
from narx_guard.const import FAULT_DRAIN_BLOCKAGE, FAULT_NONE, SYSTEM_TANKS
from narx_guard.exceptions import ConfigError
from narx_guard.models import BeamSliderParams, TwoTankParams

from .conftest import BEAM_SIGMA_V

BASE: dict[str, Any] = {
    "name": "tiny",
    "system": "beam",
    "window": 1,
    "p_bar": 0.95,
    "sigma_v": BEAM_SIGMA_V,
    "architecture": [6],
    "training": {"trajectories": 4, "steps": 12, "epochs": 3},
    "detection": {"steps": 8},
}


def _config(**overrides: Any) -> dict[str, Any]:
    data = copy.deepcopy(BASE)
    data.update(overrides)
    return data


def test_beam_preset() -> None:
    cfg = resolve_config("beam")

    assert cfg.system == "beam"
    assert isinstance(cfg.plant, BeamSliderParams)
    assert cfg.arch == [4, 10, 2, 2]
    assert cfg.detection_steps == 2000
    assert cfg.objective == "logdet"
    assert [s.name for s in cfg.scenarios] == ["normal", "vibration", "sensor_bias"]
    assert cfg.scenario("vibration").reference_rate == pytest.approx(0.2717)


def test_tanks_preset() -> None:
    cfg = resolve_config("tanks")

    assert cfg.system == SYSTEM_TANKS
    assert isinstance(cfg.plant, TwoTankParams)
    assert cfg.arch == [8, 20, 5, 2]
    blockage = cfg.scenario("drain_blockage").fault
    assert blockage.kind == FAULT_DRAIN_BLOCKAGE
    assert blockage.onset == 300
    assert blockage.magnitude == pytest.approx(0.2)


def test_defaults_are_filled_in() -> None:
    cfg = validate_config(_config())

    assert cfg.initial_state == (1.0, -1.0)
    assert cfg.detection_seed == 1
    assert cfg.workers == 1
    assert cfg.objective == "auto"
    assert [s.name for s in cfg.scenarios] == ["normal"]
    assert cfg.scenarios[0].fault.kind == FAULT_NONE
    assert cfg.n_trajectories == 4
    assert cfg.training.epochs == 3


@pytest.mark.parametrize(
    ("overrides", "message"),
    [
        ({"system": "pendulum"}, "system"),
        ({"p_bar": 1.0}, "p_bar"),
        ({"window": -1}, "window"),
        ({"sigma_v": [[1.0]]}, "sigma_v must be 2x2"),
        ({"detection": {"steps": 2}}, "detection.steps"),
        ({"training": {"steps": 2}}, "training.steps"),
        ({"detection": {"steps": 8, "initial_state": [1.0]}}, "initial_state"),
        ({"plant": {"q_in": 10.0}}, "do not apply to the beam"),
        ({"plant": {"contraction": 1.5}}, "contraction"),
        ({"training": {"momentum": 1.0}}, "momentum"),
        ({"objective": "volume"}, "objective"),
    ],
)
def test_invalid_configs(overrides: dict[str, Any], message: str) -> None:
    with pytest.raises(ConfigError, match=message):
        validate_config(_config(**overrides))


def test_scenario_checks() -> None:
    duplicate = [{"name": "a"}, {"name": "a"}]
    with pytest.raises(ConfigError, match="duplicate"):
        validate_config(_config(scenarios=duplicate))

    wrong_fault = [{"name": "a", "fault": {"kind": "drain_blockage", "magnitude": 0.2}}]
    with pytest.raises(ConfigError, match="does not apply"):
        validate_config(_config(scenarios=wrong_fault))

    late = [{"name": "a", "fault": {"kind": "vibration", "magnitude": 0.3, "onset": 8}}]
    with pytest.raises(ConfigError, match="onset"):
        validate_config(_config(scenarios=late))

    blocked = [{"name": "a", "fault": {"kind": "drain_blockage", "magnitude": 1.0}}]
    with pytest.raises(ConfigError, match="scenario 'a'"):
        validate_config(_config(system="tanks", scenarios=blocked))

    with pytest.raises(ConfigError, match="unknown scenario"):
        validate_config(_config()).scenario("missing")


def test_config_hash_tracks_content() -> None:
    first = validate_config(_config())
    again = validate_config(_config())
    changed = validate_config(_config(p_bar=0.9))

    assert first.config_hash == again.config_hash
    assert first.config_hash != changed.config_hash


def test_load_config_errors(tmp_path: Path) -> None:
    with pytest.raises(ConfigError, match="does not exist"):
        load_config(tmp_path / "missing.json")

    broken = tmp_path / "broken.json"
    broken.write_text("{", encoding="utf-8")
    with pytest.raises(ConfigError, match="not valid JSON"):
        load_config(broken)

    with pytest.raises(ConfigError, match="no preset"):
        preset_path("pendulum")


def test_resolve_config_prefers_files(tmp_path: Path) -> None:
    path = tmp_path / "beam"
    path.write_text(json.dumps(_config()), encoding="utf-8")

    assert resolve_config(str(path)).name == "tiny"
