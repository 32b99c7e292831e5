"""Certified ellipsoidal prediction bounds for ReLU NARX estimators and anomaly detection."""

from __future__ import annotations

from .certifier import CertifiedBound, certify, certify_single
from .detector import AlarmLog, DetectorConfig, false_alarm_bound
from .ellipsoid import ConfidenceSpec, Ellipsoid
from .exceptions import NarxGuardError
from .relu_net import ReluNetwork

__version__ = "1.0.0"

__all__ = [
    "AlarmLog",
    "CertifiedBound",
    "ConfidenceSpec",
    "DetectorConfig",
    "Ellipsoid",
    "NarxGuardError",
    "ReluNetwork",
    "certify",
    "certify_single",
    "false_alarm_bound",
]
