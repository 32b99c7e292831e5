"""Tests for the anomaly detector."""

from __future__ import annotations

import math
from fractions import Fraction
from pathlib import Path

import numpy as np
import pytest

from narx_guard import detector as detector_module
from narx_guard.backend import STATUS_INFEASIBLE, AffineLmi, BackendResult, ConicBackend
from narx_guard.const import (
    STATUS_NUMERICAL,
    VERDICT_ALARM,
    VERDICT_INDETERMINATE,
    VERDICT_NO_ALARM,
)
from narx_guard.detector import (
    AlarmLog,
    DetectorConfig,
    false_alarm_bound,
    rates_from_frame,
    run,
    step,
)
from narx_guard.exceptions import DimensionError, DomainError, NumericalError
from narx_guard.models import AlarmRecord
from narx_guard.relu_net import RegressorWindow, ReluNetwork
from narx_guard.storage import read_frame

from .conftest import BEAM_SIGMA_V, InfeasibleBackend, NetworkFactory


def _record(k: int, verdict: str) -> AlarmRecord:
    nan = math.nan if verdict == VERDICT_INDETERMINATE else 0.5
    return AlarmRecord(
        k=k,
        measurement=np.array([float(k), -float(k)]),
        bound=None,
        verdict=verdict,
        margin=nan,
        log_volume=nan,
        residual=0.1,
        status="infeasible" if verdict == VERDICT_INDETERMINATE else "optimal",
    )


@pytest.fixture
def detector(identity_network: ReluNetwork) -> DetectorConfig:
    """Return a memoryless detector around f(x) = relu(x)."""
    return DetectorConfig.create(identity_network, 0, 0.95, BEAM_SIGMA_V)


@pytest.mark.parametrize(
    ("p_bar", "window", "expected"),
    [(0.95, 1, 0.142625), (0.95, 3, 0.2262190625), (1.0, 1, 0.0), (0.9, 0, 0.19)],
)
def test_false_alarm_bound(p_bar: float, window: int, expected: float) -> None:
    assert false_alarm_bound(p_bar, window) == pytest.approx(expected, abs=1e-9)


def test_false_alarm_bound_rejects_bad_arguments() -> None:
    with pytest.raises(DomainError):
        false_alarm_bound(0.0, 1)
    with pytest.raises(DomainError):
        false_alarm_bound(0.9, -1)


def test_config_checks_network_dimensions(make_network: NetworkFactory) -> None:
    with pytest.raises(DimensionError):
        DetectorConfig.create(make_network([4, 5, 2]), 2, 0.95, BEAM_SIGMA_V)
    with pytest.raises(DimensionError):
        DetectorConfig.create(make_network([4, 5, 3]), 1, 0.95, BEAM_SIGMA_V)
    with pytest.raises(DomainError):
        DetectorConfig.create(make_network([4, 5, 2]), 1, 0.95, BEAM_SIGMA_V, workers=0)

    cfg = DetectorConfig.create(make_network([4, 5, 2]), 1, 0.95, BEAM_SIGMA_V)
    assert cfg.p == 2
    np.testing.assert_allclose(cfg.noise_set.shape, cfg.confidence.sigma_v_bar)


def test_step_rejects_wrong_window(detector: DetectorConfig) -> None:
    window = RegressorWindow((np.zeros(2), np.zeros(2)))

    with pytest.raises(DimensionError):
        step(detector, window, np.zeros(2), backend=InfeasibleBackend())
    with pytest.raises(DimensionError):
        step(
            detector, RegressorWindow((np.zeros(2),)), np.zeros(3), backend=InfeasibleBackend()
        )


def test_step_without_certificate_is_indeterminate(detector: DetectorConfig) -> None:
    window = RegressorWindow((np.array([5.0, 5.0]),))

    record = step(detector, window, [5.0, 5.0], k=7, backend=InfeasibleBackend())

    assert record.is_indeterminate
    assert record.k == 7
    assert math.isnan(record.margin)
    assert math.isnan(record.log_volume)
    assert record.status == "infeasible"
    assert record.residual == pytest.approx(0.0)


def test_run_keeps_timestep_order(detector: DetectorConfig) -> None:
    cfg = DetectorConfig.create(detector.network, 0, 0.95, BEAM_SIGMA_V, workers=3)
    measurements = np.column_stack((np.linspace(4.0, 6.0, 12), np.full(12, 5.0)))

    log = run(cfg, measurements, backend=InfeasibleBackend())

    assert [r.k for r in log.records] == list(range(11))
    assert log.indeterminate == 11
    assert log.evaluated == 0
    assert log.alarm_rate == 0.0
    assert log.indeterminate_fraction == 1.0


def test_run_rejects_short_or_misshapen_input(detector: DetectorConfig) -> None:
    with pytest.raises(DimensionError):
        run(detector, np.zeros((1, 2)), backend=InfeasibleBackend())
    with pytest.raises(DimensionError):
        run(detector, np.zeros((5, 3)), backend=InfeasibleBackend())


def test_alarm_log_rates() -> None:
    verdicts = [VERDICT_NO_ALARM, VERDICT_ALARM, VERDICT_INDETERMINATE, VERDICT_ALARM]
    log = AlarmLog(tuple(_record(k, v) for k, v in enumerate(verdicts)), 0.95, 1)

    assert log.steps == 4
    assert log.alarms == 2
    assert log.indeterminate == 1
    assert log.exact_rate == Fraction(2, 3)
    assert log.rate_after(3) == Fraction(1, 1)
    assert log.rate_after(10) == Fraction(0)
    assert log.false_alarm_bound == pytest.approx(0.142625)

    summary = log.summary_dict(onset=2)
    assert summary["alarm_rate_exact"] == "2/3"
    assert summary["post_onset_rate_exact"] == "1/1"
    assert summary["indeterminate"] == 1


def test_alarm_log_frame_and_recomputed_rates(tmp_path: Path) -> None:
    verdicts = [VERDICT_ALARM, VERDICT_NO_ALARM, VERDICT_NO_ALARM, VERDICT_INDETERMINATE]
    log = AlarmLog(tuple(_record(k, v) for k, v in enumerate(verdicts)), 0.95, 1)
    path = tmp_path / "alarms.csv"

    log.to_csv(path)
    frame = read_frame(path)

    assert list(frame.columns) == [
        "k", "verdict", "margin", "log_volume", "residual", "status", "y0", "y1"
    ]
    overall, late = rates_from_frame(frame, onset=2)
    assert overall == log.exact_rate == Fraction(1, 3)
    assert late == log.rate_after(2) == Fraction(0, 1)


def test_empty_alarm_log() -> None:
    log = AlarmLog((), 0.95, 1)

    assert log.exact_rate == 0
    assert log.indeterminate_fraction == 0.0
    assert log.to_frame().empty


# Solver-backed checks


def test_prediction_is_not_an_alarm(detector: DetectorConfig, solver: ConicBackend) -> None:
    window = RegressorWindow((np.array([5.0, 5.0]),))

    record = step(detector, window, [5.0, 5.0], backend=solver)

    assert record.verdict == VERDICT_NO_ALARM
    assert record.bound is not None
    assert np.isfinite(record.log_volume)


def test_distant_measurement_is_an_alarm(detector: DetectorConfig, solver: ConicBackend) -> None:
    window = RegressorWindow((np.array([5.0, 5.0]),))

    record = step(detector, window, [50.0, -50.0], backend=solver)

    assert record.is_alarm
    assert record.margin > 1.0
    assert record.residual == pytest.approx(np.hypot(45.0, 55.0))


def test_steady_measurements_raise_no_alarms(
    detector: DetectorConfig, solver: ConicBackend
) -> None:
    cfg = DetectorConfig.create(detector.network, 0, 0.95, BEAM_SIGMA_V, workers=2)

    log = run(cfg, np.full((6, 2), 5.0), backend=solver)

    assert [r.k for r in log.records] == [0, 1, 2, 3, 4]
    assert log.alarms == 0
    assert log.indeterminate == 0


class FlakyBackend(ConicBackend):
    """Backend whose second solve fails numerically; every other LMI is infeasible."""

    name = "flaky"
    thread_safe = False

    def __init__(self) -> None:
        """Count the submitted problems."""
        super().__init__()
        self.calls = 0

    @property
    def supports_logdet(self) -> bool:
        """Return True."""
        return True

    def _solve(self, lmi: AffineLmi) -> BackendResult:
        self.calls += 1
        if self.calls == 2:
            raise NumericalError("eigendecomposition did not converge")
        return BackendResult(STATUS_INFEASIBLE, None, None, self.name, 0.0)


def test_numerical_failure_marks_one_step_indeterminate(detector: DetectorConfig) -> None:
    cfg = DetectorConfig.create(detector.network, 0, 0.95, BEAM_SIGMA_V, workers=3)

    log = run(cfg, np.full((6, 2), 5.0), backend=FlakyBackend())

    assert [r.k for r in log.records] == [0, 1, 2, 3, 4]
    assert log.indeterminate == 5
    statuses = sorted(r.status for r in log.records)
    assert statuses == [STATUS_NUMERICAL] + ["infeasible"] * 4


def test_membership_failure_is_indeterminate(
    detector: DetectorConfig, solver: ConicBackend, monkeypatch: pytest.MonkeyPatch
) -> None:
    def fail(*args: object, **kwargs: object) -> None:
        raise NumericalError("root bracket not found")

    monkeypatch.setattr(detector_module, "minkowski_contains", fail)

    record = step(detector, RegressorWindow((np.array([5.0, 5.0]),)), [5.0, 5.0], backend=solver)

    assert record.is_indeterminate
    assert record.status == STATUS_NUMERICAL
    assert record.bound is None


def _rotation(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s], [s, c]])


def test_verdicts_survive_an_orthonormal_change_of_basis(
    make_network: NetworkFactory, rng: np.random.Generator, solver: ConicBackend
) -> None:
    net = make_network([4, 8, 2])
    q = _rotation(0.7)
    sigma_v = np.array(BEAM_SIGMA_V)
    rotated = ReluNetwork(
        [net.weights[0] @ np.kron(np.eye(2), q.T), q @ net.weights[1]],
        [net.biases[0], q @ net.biases[1]],
    )
    ys = rng.normal(scale=0.5, size=(8, 2))
    ys[4] += [3.0, -3.0]

    plain = run(DetectorConfig.create(net, 1, 0.95, sigma_v), ys, backend=solver)
    turned = run(
        DetectorConfig.create(rotated, 1, 0.95, q @ sigma_v @ q.T), ys @ q.T, backend=solver
    )

    assert plain.indeterminate == turned.indeterminate == 0
    for a, b in zip(plain.records, turned.records, strict=True):
        assert b.log_volume == pytest.approx(a.log_volume, abs=1e-4)
        assert b.residual == pytest.approx(a.residual, abs=1e-9)
        if abs(a.margin - 1.0) > 1e-3:
            assert b.verdict == a.verdict
    by_step = {r.k: r for r in plain.records}
    assert by_step[3].is_alarm
