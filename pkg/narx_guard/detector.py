"""Anomaly detector: certify the next-step prediction and test the new measurement.

At every timestep k the window y_k, ..., y_{k-N} yields input ellipsoids
E(y_{k-i}, Sigma_v_bar). The certified prediction bound, widened by the noise
confidence set E(0, Sigma_v_bar), is the no-alarm region for y_{k+1}.
"""

from __future__ import annotations

import asyncio
import logging
import math
import os
from collections.abc import Sequence
from dataclasses import dataclass
from fractions import Fraction
from typing import Any

import numpy as np
import pandas as pd
from numpy.typing import ArrayLike, NDArray

from .backend import ConicBackend, get_backend
from .certifier import certify
from .const import (
    OBJECTIVE_AUTO,
    OBJECTIVE_CHOICES,
    STATUS_NUMERICAL,
    VERDICT_ALARM,
    VERDICT_INDETERMINATE,
    VERDICT_NO_ALARM,
)
from .ellipsoid import ConfidenceSpec, Ellipsoid, confidence_ellipsoid, minkowski_contains
from .exceptions import DimensionError, DomainError, NumericalError, SolverError
from .models import AlarmRecord
from .relu_net import RegressorWindow, ReluNetwork, forward
from .storage import write_frame

_LOGGER = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class DetectorConfig:
    """Detector settings around one trained network."""

    network: ReluNetwork
    window: int
    confidence: ConfidenceSpec
    objective: str = OBJECTIVE_AUTO
    use_interval_bounds: bool = False
    workers: int = 1

    def __post_init__(self) -> None:
        if self.window < 0:
            raise DomainError(f"window length N must be nonnegative, got {self.window}")
        if self.objective not in OBJECTIVE_CHOICES:
            raise DomainError(f"unknown objective {self.objective!r}")
        if self.workers < 1:
            raise DomainError("workers must be positive")
        expected = self.confidence.p * (self.window + 1)
        if self.network.input_dim != expected:
            raise DimensionError(
                f"network takes {self.network.input_dim} inputs, window of {self.window + 1} "
                f"measurements in R^{self.confidence.p} gives {expected}"
            )
        if self.network.output_dim != self.confidence.p:
            raise DimensionError(
                f"network predicts R^{self.network.output_dim}, measurements are "
                f"R^{self.confidence.p}"
            )

    @classmethod
    def create(
        cls,
        network: ReluNetwork,
        window: int,
        p_bar: float,
        sigma_v: ArrayLike,
        **kwargs: Any,
    ) -> DetectorConfig:
        """Build the confidence set from p_bar and Sigma_v."""
        return cls(network, window, ConfidenceSpec.build(sigma_v, p_bar), **kwargs)

    @property
    def p(self) -> int:
        """Return the measurement dimension."""
        return self.confidence.p

    @property
    def noise_set(self) -> Ellipsoid:
        """Return E(0, Sigma_v_bar)."""
        return confidence_ellipsoid(self.confidence, np.zeros(self.p))


def false_alarm_bound(p_bar: float, window: int) -> float:
    """Return 1 - p_bar^(N + 2), the per-step false-alarm bound."""
    if not 0.0 < p_bar <= 1.0:
        raise DomainError(f"p_bar must lie in (0, 1], got {p_bar}")
    if window < 0:
        raise DomainError(f"window length N must be nonnegative, got {window}")
    return 1.0 - p_bar ** (window + 2)


def step(
    cfg: DetectorConfig,
    window: RegressorWindow,
    y_next: ArrayLike,
    k: int = 0,
    backend: ConicBackend | None = None,
) -> AlarmRecord:
    """Decide whether y_{k+1} is consistent with the certified prediction."""
    if window.length != cfg.window + 1 or window.p != cfg.p:
        raise DimensionError(
            f"window holds {window.length} measurements in R^{window.p}, expected "
            f"{cfg.window + 1} in R^{cfg.p}"
        )
    y = np.asarray(y_next, dtype=np.float64).reshape(-1)
    if y.size != cfg.p:
        raise DimensionError(f"measurement has dimension {y.size}, expected {cfg.p}")

    residual = float(np.linalg.norm(forward(cfg.network, window.stacked) - y))
    inputs = [confidence_ellipsoid(cfg.confidence, entry) for entry in window.entries]
    try:
        bound = certify(
            cfg.network,
            inputs,
            objective=cfg.objective,
            backend=backend,
            use_interval_bounds=cfg.use_interval_bounds,
        )
        membership = minkowski_contains(bound.ellipsoid, cfg.noise_set, y)
    except (SolverError, NumericalError) as err:
        _LOGGER.warning("Step %d indeterminate: %s", k, err)
        return AlarmRecord(
            k=k,
            measurement=y,
            bound=None,
            verdict=VERDICT_INDETERMINATE,
            margin=math.nan,
            log_volume=math.nan,
            residual=residual,
            status=err.status if isinstance(err, SolverError) else STATUS_NUMERICAL,
        )

    verdict = VERDICT_NO_ALARM if membership.inside else VERDICT_ALARM
    _LOGGER.debug(
        "Step %d: %s (margin %.4f, log-volume %.4f, residual %.4f)",
        k,
        verdict,
        membership.margin,
        bound.log_volume,
        residual,
    )
    return AlarmRecord(
        k=k,
        measurement=y,
        bound=bound.ellipsoid,
        verdict=verdict,
        margin=membership.margin,
        log_volume=bound.log_volume,
        residual=residual,
        status=bound.status,
    )


def _rate(alarms: int, evaluated: int) -> Fraction:
    return Fraction(alarms, evaluated) if evaluated else Fraction(0)


@dataclass(frozen=True, eq=False)
class AlarmLog:
    """Detector records in timestep order with their summary statistics.

    Indeterminate steps are excluded from every rate denominator.
    """

    records: tuple[AlarmRecord, ...]
    p_bar: float
    window: int

    @property
    def steps(self) -> int:
        """Return the number of timesteps processed."""
        return len(self.records)

    @property
    def alarms(self) -> int:
        """Return the number of alarms."""
        return sum(record.is_alarm for record in self.records)

    @property
    def indeterminate(self) -> int:
        """Return the number of steps without a valid certificate."""
        return sum(record.is_indeterminate for record in self.records)

    @property
    def evaluated(self) -> int:
        """Return the number of steps with a verdict."""
        return self.steps - self.indeterminate

    @property
    def exact_rate(self) -> Fraction:
        """Return alarms / evaluated steps as an exact rational."""
        return _rate(self.alarms, self.evaluated)

    @property
    def alarm_rate(self) -> float:
        """Return the alarm rate."""
        return float(self.exact_rate)

    @property
    def false_alarm_bound(self) -> float:
        """Return 1 - p_bar^(N + 2)."""
        return false_alarm_bound(self.p_bar, self.window)

    @property
    def indeterminate_fraction(self) -> float:
        """Return the share of indeterminate steps."""
        return self.indeterminate / self.steps if self.steps else 0.0

    def rate_after(self, onset: int) -> Fraction:
        """Return the alarm rate over steps whose tested measurement y_{k+1} has k + 1 >= onset."""
        late = [r for r in self.records if r.k + 1 >= onset and not r.is_indeterminate]
        return _rate(sum(r.is_alarm for r in late), len(late))

    def to_frame(self) -> pd.DataFrame:
        """Return one row per record."""
        rows = []
        for record in self.records:
            row: dict[str, Any] = {
                "k": record.k,
                "verdict": record.verdict,
                "margin": record.margin,
                "log_volume": record.log_volume,
                "residual": record.residual,
                "status": record.status,
            }
            for j, value in enumerate(record.measurement):
                row[f"y{j}"] = float(value)
            rows.append(row)
        return pd.DataFrame(rows, columns=_frame_columns(self.records))

    def to_csv(self, path: str | os.PathLike[str]) -> None:
        """Write the records as CSV."""
        write_frame(path, self.to_frame())

    def summary_dict(self, onset: int | None = None) -> dict[str, Any]:
        """Return the JSON summary."""
        rate = self.exact_rate
        summary: dict[str, Any] = {
            "steps": self.steps,
            "evaluated": self.evaluated,
            "alarms": self.alarms,
            "indeterminate": self.indeterminate,
            "alarm_rate": float(rate),
            "alarm_rate_exact": f"{rate.numerator}/{rate.denominator}",
            "false_alarm_bound": self.false_alarm_bound,
            "p_bar": self.p_bar,
            "window": self.window,
        }
        if onset is not None:
            late = self.rate_after(onset)
            summary["onset"] = onset
            summary["post_onset_rate"] = float(late)
            summary["post_onset_rate_exact"] = f"{late.numerator}/{late.denominator}"
        return summary


def _frame_columns(records: Sequence[AlarmRecord]) -> list[str]:
    p = records[0].measurement.size if records else 0
    base = ["k", "verdict", "margin", "log_volume", "residual", "status"]
    return base + [f"y{j}" for j in range(p)]


def rates_from_frame(frame: pd.DataFrame, onset: int | None = None) -> tuple[Fraction, Fraction]:
    """Recompute (overall rate, post-onset rate) from an exported alarm log."""
    verdicts = frame[frame["verdict"] != VERDICT_INDETERMINATE]
    overall = _rate(int((verdicts["verdict"] == VERDICT_ALARM).sum()), len(verdicts))
    if onset is None:
        return overall, overall
    late = verdicts[verdicts["k"] + 1 >= onset]
    return overall, _rate(int((late["verdict"] == VERDICT_ALARM).sum()), len(late))


def _windows(
    measurements: NDArray[np.float64], window: int
) -> list[tuple[int, RegressorWindow, NDArray[np.float64]]]:
    return [
        (k, RegressorWindow.from_sequence(measurements, k, window), measurements[k + 1])
        for k in range(window, measurements.shape[0] - 1)
    ]


async def async_run(
    cfg: DetectorConfig,
    measurements: ArrayLike,
    backend: ConicBackend | None = None,
) -> AlarmLog:
    """Run the detector over a trajectory with up to ``cfg.workers`` concurrent solves."""
    ys = np.asarray(measurements, dtype=np.float64)
    if ys.ndim != 2 or ys.shape[1] != cfg.p:
        raise DimensionError(f"measurements must be a (T, {cfg.p}) array, got {ys.shape}")
    if ys.shape[0] < cfg.window + 2:
        raise DimensionError(
            f"{ys.shape[0]} measurements are too few for a window of {cfg.window + 1}"
        )
    backend = backend or get_backend()
    semaphore = asyncio.Semaphore(cfg.workers)

    async def _async_step(
        k: int, window: RegressorWindow, y_next: NDArray[np.float64]
    ) -> AlarmRecord:
        async with semaphore:
            return await asyncio.to_thread(step, cfg, window, y_next, k, backend)

    records = await asyncio.gather(
        *(_async_step(k, window, y_next) for k, window, y_next in _windows(ys, cfg.window))
    )
    log = AlarmLog(tuple(records), cfg.confidence.p_bar, cfg.window)
    _LOGGER.info(
        "Detector finished %d steps: %d alarms (rate %.4f, bound %.4f), %d indeterminate",
        log.steps,
        log.alarms,
        log.alarm_rate,
        log.false_alarm_bound,
        log.indeterminate,
    )
    return log


def run(
    cfg: DetectorConfig,
    measurements: ArrayLike,
    backend: ConicBackend | None = None,
) -> AlarmLog:
    """Synchronous wrapper around :func:`async_run`."""
    return asyncio.run(async_run(cfg, measurements, backend))
