"""Shared fixtures for the narx_guard tests."""

from __future__ import annotations

from collections.abc import Callable, Sequence

import numpy as np
import pytest

from narx_guard.backend import (
    STATUS_INFEASIBLE,
    STATUS_OPTIMAL,
    AffineLmi,
    BackendResult,
    ConicBackend,
)
from narx_guard.relu_net import ReluNetwork

BEAM_SIGMA_V = [[0.0214, 0.0112], [0.0112, 0.0217]]
BEAM_SIGMA_V_BAR = [[0.1282, 0.0671], [0.0671, 0.1300]]

NetworkFactory = Callable[[Sequence[int]], ReluNetwork]


@pytest.fixture
def rng() -> np.random.Generator:
    """Return a seeded generator."""
    return np.random.default_rng(20240611)


@pytest.fixture
def beam_sigma_v() -> np.ndarray:
    """Return the beam-and-slider sensor noise covariance."""
    return np.array(BEAM_SIGMA_V)


@pytest.fixture
def make_network(rng: np.random.Generator) -> NetworkFactory:
    """Return a factory for random networks with the given architecture."""

    def factory(arch: Sequence[int]) -> ReluNetwork:
        weights = [
            rng.normal(scale=1.0 / np.sqrt(arch[t]), size=(arch[t + 1], arch[t]))
            for t in range(len(arch) - 1)
        ]
        biases = [rng.normal(scale=0.1, size=arch[t + 1]) for t in range(len(arch) - 1)]
        return ReluNetwork(weights, biases)

    return factory


@pytest.fixture
def identity_network() -> ReluNetwork:
    """Return f(x) = relu(x) on R^2, the identity on the positive orthant."""
    return ReluNetwork([np.eye(2), np.eye(2)], [np.zeros(2), np.zeros(2)])


@pytest.fixture
def solver() -> ConicBackend:
    """Return the default conic backend, skipping when cvxpy is missing."""
    pytest.importorskip("cvxpy")
    from narx_guard.backend import get_backend

    return get_backend("cvxpy")


class InfeasibleBackend(ConicBackend):
    """Backend that reports every LMI as infeasible."""

    name = "infeasible"

    @property
    def supports_logdet(self) -> bool:
        """Return True."""
        return True

    def _solve(self, lmi: AffineLmi) -> BackendResult:
        return BackendResult(STATUS_INFEASIBLE, None, None, self.name, 0.0)


class ZeroBackend(ConicBackend):
    """Backend that claims optimality at x = 0, which never passes the re-check."""

    name = "zero"
    thread_safe = False

    def __init__(self) -> None:
        """Count the submitted problems."""
        super().__init__()
        self.calls = 0

    @property
    def supports_logdet(self) -> bool:
        """Return False."""
        return False

    def _solve(self, lmi: AffineLmi) -> BackendResult:
        self.calls += 1
        return BackendResult(STATUS_OPTIMAL, np.zeros(lmi.n_vars), 0.0, self.name, 0.0)
