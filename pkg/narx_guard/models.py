"""Data models for the NARX guard package."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any

import numpy as np
from numpy.typing import NDArray

from .const import (
    BEAM_ANGLE,
    BEAM_CONTRACTION,
    FAULT_DRAIN_BLOCKAGE,
    FAULT_KINDS,
    FAULT_NONE,
    FAULT_SENSOR_BIAS,
    FAULT_VIBRATION,
    G_SI,
    TANK_DISCHARGE,
    TANK_DRAIN_AREA,
    TANK_DT,
    TANK_Q_IN,
    TANK_SUBSTEPS,
    VERDICT_ALARM,
    VERDICT_INDETERMINATE,
    VERDICT_NO_ALARM,
)
from .ellipsoid import Ellipsoid
from .exceptions import DomainError


@dataclass(frozen=True)
class TrainingConfig:
    """Hyperparameters for mini-batch SGD with momentum."""

    epochs: int = 300
    batch_size: int = 32
    learning_rate: float = 1e-2
    momentum: float = 0.9
    seed: int = 0
    validation_split: float = 0.2

    def __post_init__(self) -> None:
        if self.epochs < 1 or self.batch_size < 1:
            raise DomainError("epochs and batch_size must be positive")
        if self.learning_rate <= 0.0:
            raise DomainError("learning_rate must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise DomainError("momentum must lie in [0, 1)")
        if self.seed < 0:
            raise DomainError("seed must be nonnegative")
        if not 0.0 < self.validation_split < 1.0:
            raise DomainError("validation_split must lie in (0, 1)")


@dataclass(frozen=True)
class FaultSpec:
    """Fault injected into a simulation from ``onset`` onward."""

    kind: str = FAULT_NONE
    magnitude: float = 0.0
    onset: int = 0

    def __post_init__(self) -> None:
        if self.kind not in FAULT_KINDS:
            raise DomainError(f"unknown fault kind {self.kind!r}")
        if not math.isfinite(self.magnitude):
            raise DomainError("fault magnitude must be finite")
        if self.kind == FAULT_DRAIN_BLOCKAGE and not 0.0 <= self.magnitude < 1.0:
            raise DomainError("blocked drain fraction must lie in [0, 1)")
        if self.onset < 0:
            raise DomainError("fault onset must be nonnegative")

    def active(self, kind: str, k: int) -> bool:
        """Return True if this fault of ``kind`` acts at timestep k."""
        return self.kind == kind and k >= self.onset

    @classmethod
    def parse(cls, data: dict[str, Any] | None) -> FaultSpec:
        """Build from a config dictionary."""
        if not data:
            return cls()
        return cls(
            kind=data.get("kind", FAULT_NONE),
            magnitude=float(data.get("magnitude", 0.0)),
            onset=int(data.get("onset", 0)),
        )

    @classmethod
    def vibration(cls, delta: float, onset: int = 0) -> FaultSpec:
        """Additive periodic shaft displacement [delta; delta] sin(k)."""
        return cls(FAULT_VIBRATION, delta, onset)

    @classmethod
    def sensor_bias(cls, delta: float, onset: int = 0) -> FaultSpec:
        """Constant measurement offset [delta; delta]."""
        return cls(FAULT_SENSOR_BIAS, delta, onset)

    @classmethod
    def drain_blockage(cls, fraction: float, onset: int = 0) -> FaultSpec:
        """Lower drain area reduced by ``fraction``."""
        return cls(FAULT_DRAIN_BLOCKAGE, fraction, onset)


@dataclass(frozen=True)
class BeamSliderParams:
    """Linear beam-and-slider map x+ = contraction * R(beta) x."""

    sigma_v: tuple[tuple[float, ...], ...]
    contraction: float = BEAM_CONTRACTION
    beta: float = BEAM_ANGLE * math.pi
    vibration_recursive: bool = False

    def __post_init__(self) -> None:
        if not abs(self.contraction) < 1.0:
            raise DomainError("beam contraction must satisfy |c| < 1")
        Ellipsoid(np.zeros(len(self.sigma_v)), self.sigma_v)

    @property
    def transition(self) -> NDArray[np.float64]:
        """Return the 2x2 state transition matrix."""
        c, s = math.cos(self.beta), math.sin(self.beta)
        return self.contraction * np.array([[c, -s], [s, c]])


@dataclass(frozen=True)
class TwoTankParams:
    """Gravity-drained two-tank cascade, integrated with fixed-step RK4."""

    sigma_v: tuple[tuple[float, ...], ...]
    q_in: float = TANK_Q_IN
    discharge: float = TANK_DISCHARGE
    drain_area: float = TANK_DRAIN_AREA
    g: float = G_SI
    dt: float = TANK_DT
    substeps: int = TANK_SUBSTEPS

    def __post_init__(self) -> None:
        if min(self.q_in, self.discharge, self.drain_area, self.g, self.dt) <= 0.0:
            raise DomainError("tank parameters must be positive")
        if self.substeps < 1:
            raise DomainError("substeps must be positive")
        Ellipsoid(np.zeros(len(self.sigma_v)), self.sigma_v)

    @property
    def upper_equilibrium(self) -> float:
        """Return h1* = (Q_in / (c_d A_d))^2 / (2 g)."""
        return (self.q_in / (self.discharge * self.drain_area)) ** 2 / (2.0 * self.g)


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Simulated plant run.

    ``ideal`` holds y*_k = H x_k plus any sensor offset, so that
    ``measurements == ideal + noise`` holds exactly.
    """

    states: NDArray[np.float64]
    ideal: NDArray[np.float64]
    measurements: NDArray[np.float64]
    noise: NDArray[np.float64]
    seed: int | None = None
    fault: FaultSpec = field(default_factory=FaultSpec)

    def __len__(self) -> int:
        return int(self.measurements.shape[0])


@dataclass(frozen=True, eq=False)
class AlarmRecord:
    """Detector verdict for one timestep."""

    k: int
    measurement: NDArray[np.float64]
    bound: Ellipsoid | None
    verdict: str
    margin: float
    log_volume: float
    residual: float
    status: str

    def __post_init__(self) -> None:
        if self.verdict not in (VERDICT_ALARM, VERDICT_NO_ALARM, VERDICT_INDETERMINATE):
            raise DomainError(f"unknown verdict {self.verdict!r}")

    @property
    def is_alarm(self) -> bool:
        """Return True if the step raised an alarm."""
        return self.verdict == VERDICT_ALARM

    @property
    def is_indeterminate(self) -> bool:
        """Return True if no valid certificate was obtained."""
        return self.verdict == VERDICT_INDETERMINATE
