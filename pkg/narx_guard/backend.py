"""Solver backends for affine linear matrix inequalities.

A backend receives the LMI in generic affine form

    M(x) = F_0 + sum_j x_j F_j  <=  -margin * I,
    U(x) = G_0 + sum_j x_j G_j  with  u_floor * I <= U(x) <= u_ceiling * I,
    x_j >= 0 for the flagged coordinates,

and maximizes tr(U(x)) or logdet(U(x)). It returns a status and the value of x.
"""

from __future__ import annotations

import logging
import os
import threading
import time
from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Any

import numpy as np
from numpy.typing import NDArray

from .const import DEFAULT_BACKEND, ENV_BACKEND, OBJECTIVE_LOGDET, OBJECTIVES
from .exceptions import BackendUnavailableError, DimensionError, DomainError

_LOGGER = logging.getLogger(__name__)

STATUS_OPTIMAL = "optimal"
STATUS_INACCURATE = "optimal_inaccurate"
STATUS_INFEASIBLE = "infeasible"
STATUS_UNBOUNDED = "unbounded"
STATUS_ERROR = "error"
SOLVED_STATUSES = (STATUS_OPTIMAL, STATUS_INACCURATE)


@dataclass(frozen=True, eq=False)
class AffineLmi:
    """Solver-independent LMI problem data."""

    constant: NDArray[np.float64]
    coefficients: NDArray[np.float64]
    nonneg: NDArray[np.bool_]
    u_constant: NDArray[np.float64]
    u_coefficients: NDArray[np.float64]
    objective: str
    margin: float
    u_floor: float
    u_ceiling: float

    def __post_init__(self) -> None:
        m = self.coefficients.shape[0]
        n = self.constant.shape[0]
        k = self.u_constant.shape[0]
        if self.coefficients.shape != (m, n, n) or self.constant.shape != (n, n):
            raise DimensionError("LMI coefficient matrices must be square and share one size")
        if self.u_coefficients.shape != (m, k, k) or self.nonneg.shape != (m,):
            raise DimensionError("U coefficients and sign flags must cover every variable")
        if self.objective not in OBJECTIVES:
            raise DomainError(f"unknown objective {self.objective!r}")

    @property
    def n_vars(self) -> int:
        """Return the number of scalar decision variables."""
        return int(self.coefficients.shape[0])

    @property
    def size(self) -> int:
        """Return the side of M(x)."""
        return int(self.constant.shape[0])

    def evaluate(self, x: NDArray[np.float64]) -> NDArray[np.float64]:
        """Return M(x)."""
        return self.constant + np.tensordot(x, self.coefficients, axes=1)


@dataclass(frozen=True, eq=False)
class BackendResult:
    """Outcome of one backend solve."""

    status: str
    x: NDArray[np.float64] | None
    objective: float | None
    solver: str
    solve_time: float


class ConicBackend(ABC):
    """Minimal contract every LMI solver backend implements."""

    name = "abstract"
    thread_safe = True

    def __init__(self) -> None:
        """Initialize the serialization lock for single-use backends."""
        self._lock = threading.Lock()

    @property
    @abstractmethod
    def supports_logdet(self) -> bool:
        """Return True if the backend can maximize logdet(U)."""

    @abstractmethod
    def _solve(self, lmi: AffineLmi) -> BackendResult:
        """Solve one LMI."""

    def submit(self, lmi: AffineLmi) -> BackendResult:
        """Solve one LMI, serializing calls when the backend is single-use."""
        if lmi.objective == OBJECTIVE_LOGDET and not self.supports_logdet:
            raise BackendUnavailableError(
                f"backend {self.name} does not support logdet objectives"
            )
        if self.thread_safe:
            return self._solve(lmi)
        with self._lock:
            return self._solve(lmi)


class CvxpyBackend(ConicBackend):
    """LMI backend on top of cvxpy, defaulting to the Clarabel interior-point solver."""

    name = "cvxpy"
    LOGDET_SOLVERS = frozenset({"CLARABEL", "SCS", "MOSEK"})

    def __init__(self, solver: str | None = None, **options: Any) -> None:
        """Resolve the cvxpy solver, failing fast if it is not installed."""
        super().__init__()
        try:
            import cvxpy as cp
        except ImportError as err:
            raise BackendUnavailableError("cvxpy is not installed") from err
        installed = set(cp.installed_solvers())
        if solver is None:
            solver = "CLARABEL" if "CLARABEL" in installed else "SCS"
        solver = solver.upper()
        if solver not in installed:
            raise BackendUnavailableError(
                f"cvxpy solver {solver} is not installed (available: {sorted(installed)})"
            )
        self.solver = solver
        self.options = options
        self._cp = cp

    @property
    def supports_logdet(self) -> bool:
        """Return True for solvers with exponential-cone support."""
        return self.solver in self.LOGDET_SOLVERS

    def _solve(self, lmi: AffineLmi) -> BackendResult:
        cp = self._cp
        n, k, m = lmi.size, lmi.u_constant.shape[0], lmi.n_vars
        x = cp.Variable(m)
        lmi_var = cp.Variable((n, n), symmetric=True)
        u_var = cp.Variable((k, k), symmetric=True)

        m_expr = lmi.constant.reshape(-1) + lmi.coefficients.reshape(m, n * n).T @ x
        u_expr = lmi.u_constant.reshape(-1) + lmi.u_coefficients.reshape(m, k * k).T @ x
        constraints = [
            cp.reshape(lmi_var, (n * n,), order="C") == m_expr,
            cp.reshape(u_var, (k * k,), order="C") == u_expr,
            lmi_var << -lmi.margin * np.eye(n),
            u_var >> lmi.u_floor * np.eye(k),
            u_var << lmi.u_ceiling * np.eye(k),
        ]
        nonneg = np.flatnonzero(lmi.nonneg)
        if nonneg.size:
            constraints.append(x[nonneg] >= 0)

        if lmi.objective == OBJECTIVE_LOGDET:
            objective = cp.Maximize(cp.log_det(u_var))
        else:
            objective = cp.Maximize(cp.trace(u_var))
        problem = cp.Problem(objective, constraints)

        start = time.perf_counter()
        try:
            problem.solve(solver=self.solver, **self.options)
        except cp.error.SolverError as err:
            _LOGGER.debug("cvxpy solver %s failed: %s", self.solver, err)
            elapsed = time.perf_counter() - start
            return BackendResult(STATUS_ERROR, None, None, self.solver, elapsed)
        elapsed = time.perf_counter() - start

        status = {
            cp.OPTIMAL: STATUS_OPTIMAL,
            cp.OPTIMAL_INACCURATE: STATUS_INACCURATE,
            cp.INFEASIBLE: STATUS_INFEASIBLE,
            cp.INFEASIBLE_INACCURATE: STATUS_INFEASIBLE,
            cp.UNBOUNDED: STATUS_UNBOUNDED,
            cp.UNBOUNDED_INACCURATE: STATUS_UNBOUNDED,
        }.get(problem.status, STATUS_ERROR)
        _LOGGER.debug(
            "cvxpy/%s solved %d-variable LMI of size %d: %s in %.3fs",
            self.solver,
            m,
            n,
            status,
            elapsed,
        )
        if status not in SOLVED_STATUSES or x.value is None:
            return BackendResult(status, None, None, self.solver, elapsed)
        return BackendResult(
            status=status,
            x=np.asarray(x.value, dtype=np.float64),
            objective=float(problem.value),
            solver=self.solver,
            solve_time=elapsed,
        )


def get_backend(name: str | None = None) -> ConicBackend:
    """Return a backend by name: ``cvxpy`` or ``cvxpy:<SOLVER>``.

    Falls back to the NARX_GUARD_BACKEND environment variable, then to cvxpy.
    """
    spec = name or os.environ.get(ENV_BACKEND) or DEFAULT_BACKEND
    family, _, solver = spec.partition(":")
    if family.lower() == "cvxpy":
        return CvxpyBackend(solver or None)
    raise BackendUnavailableError(f"unknown solver backend {spec!r}")
