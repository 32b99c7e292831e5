"""Certified prediction ellipsoids for ReLU networks via a semidefinite program.

The S-procedure combines the input, activation and output QCs of :mod:`.qc`
into one linear matrix inequality

    [[sum_i tau_i M_i + M_mid(Q) - e e^T,  F^T],
     [F,                                   -I ]]  <=  0,

with F = U [W^l S^l, b^l] + [0, V]. Any feasible (tau, Q, U, V) certifies that
every network output reachable from the input ellipsoids lies in
E(-U^-1 V, U^-2); the solver maximizes tr(U) or logdet(U) to shrink it.
"""

from __future__ import annotations

import logging
import os
from collections.abc import Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .backend import SOLVED_STATUSES, AffineLmi, ConicBackend, get_backend
from .const import (
    FEASIBILITY_TOL,
    LMI_MARGIN_RETRIES,
    OBJECTIVE_AUTO,
    OBJECTIVE_CHOICES,
    OBJECTIVE_LOGDET,
    OBJECTIVE_TRACE,
    OBJECTIVES,
    SIGN_TOL,
    U_CEILING,
    U_FLOOR,
)
from .ellipsoid import Ellipsoid, log_volume, sample, translate
from .exceptions import DimensionError, DomainError, SolverError
from .qc import (
    ReluQcMultipliers,
    StackedForm,
    activation_qc,
    input_qcs,
    interval_preactivation_bounds,
    neuron_phases,
    output_lift,
    single_input_qc,
    stack,
)
from .relu_net import ReluNetwork, forward
from .storage import atomic_write_text

_LOGGER = logging.getLogger(__name__)


@dataclass(frozen=True)
class VariableLayout:
    """Order of the scalar decision variables: tau, lambda, nu, eta, U (upper triangle), V."""

    n_tau: int
    n_hidden: int
    n_pi: int

    @property
    def n_u(self) -> int:
        """Return the number of free entries of the symmetric U."""
        return self.n_pi * (self.n_pi + 1) // 2

    @property
    def n_vars(self) -> int:
        """Return the total number of scalar variables."""
        return self.n_tau + 3 * self.n_hidden + self.n_u + self.n_pi

    def counts(self) -> dict[str, int]:
        """Return the multiplier structure descriptor."""
        return {
            "tau": self.n_tau,
            "lambda": self.n_hidden,
            "nu": self.n_hidden,
            "eta": self.n_hidden,
            "U": self.n_u,
            "V": self.n_pi,
        }

    def _slices(self) -> tuple[slice, slice, slice, slice, slice, slice]:
        bounds = np.cumsum(
            [0, self.n_tau, self.n_hidden, self.n_hidden, self.n_hidden, self.n_u, self.n_pi]
        )
        return tuple(  # type: ignore[return-value]
            slice(int(lo), int(hi)) for lo, hi in zip(bounds[:-1], bounds[1:], strict=True)
        )

    def unpack(
        self,
        x: NDArray[np.float64],
        free_nu: NDArray[np.bool_] | None = None,
        free_eta: NDArray[np.bool_] | None = None,
    ) -> tuple[NDArray[np.float64], ReluQcMultipliers, NDArray[np.float64], NDArray[np.float64]]:
        """Split x into (tau, multipliers, U, V)."""
        if x.shape != (self.n_vars,):
            raise DimensionError(f"expected {self.n_vars} variables, got {x.shape}")
        s_tau, s_lam, s_nu, s_eta, s_u, s_v = self._slices()
        u = np.zeros((self.n_pi, self.n_pi))
        rows, cols = np.triu_indices(self.n_pi)
        u[rows, cols] = x[s_u]
        u[cols, rows] = x[s_u]
        multipliers = ReluQcMultipliers(
            lam=x[s_lam].copy(),
            nu=x[s_nu].copy(),
            eta=x[s_eta].copy(),
            free_nu=free_nu,
            free_eta=free_eta,
        )
        return x[s_tau].copy(), multipliers, u, x[s_v].copy()

    def pack(
        self,
        tau: ArrayLike,
        multipliers: ReluQcMultipliers,
        U: ArrayLike,
        V: ArrayLike,
    ) -> NDArray[np.float64]:
        """Inverse of :meth:`unpack`."""
        u = np.atleast_2d(np.asarray(U, dtype=np.float64))
        rows, cols = np.triu_indices(self.n_pi)
        x = np.concatenate(
            (
                np.asarray(tau, dtype=np.float64).reshape(-1),
                multipliers.lam,
                multipliers.nu,
                multipliers.eta,
                u[rows, cols],
                np.asarray(V, dtype=np.float64).reshape(-1),
            )
        )
        if x.size != self.n_vars:
            raise DimensionError(f"packed {x.size} values into a layout of {self.n_vars}")
        return x

    def nonneg_mask(
        self, free_nu: NDArray[np.bool_] | None, free_eta: NDArray[np.bool_] | None
    ) -> NDArray[np.bool_]:
        """Return the flags of the sign-constrained variables (tau, nu, eta)."""
        s_tau, _, s_nu, s_eta, _, _ = self._slices()
        mask = np.zeros(self.n_vars, dtype=bool)
        mask[s_tau] = True
        mask[s_nu] = True if free_nu is None else ~free_nu
        mask[s_eta] = True if free_eta is None else ~free_eta
        return mask


@dataclass(frozen=True, eq=False)
class LmiProblem:
    """Everything needed to pose the certification SDP."""

    stacked: StackedForm
    input_matrices: tuple[NDArray[np.float64], ...]
    objective: str = OBJECTIVE_TRACE
    free_nu: NDArray[np.bool_] | None = None
    free_eta: NDArray[np.bool_] | None = None
    feasibility_tol: float = FEASIBILITY_TOL
    u_floor: float = U_FLOOR
    u_ceiling: float = U_CEILING

    def __post_init__(self) -> None:
        if self.objective not in OBJECTIVES:
            raise DomainError(f"objective must be one of {OBJECTIVES}, got {self.objective!r}")
        if not self.input_matrices:
            raise DimensionError("at least one input QC is required")
        side = self.stacked.size
        for i, m in enumerate(self.input_matrices):
            if m.shape != (side, side):
                raise DimensionError(f"input QC {i} is {m.shape}, expected {side}x{side}")
        for mask in (self.free_nu, self.free_eta):
            if mask is not None and mask.shape != (self.stacked.n_hidden,):
                raise DimensionError("phase masks must cover every hidden neuron")
        if not 0.0 < self.u_floor < self.u_ceiling:
            raise DomainError("U bounds must satisfy 0 < floor < ceiling")

    @property
    def layout(self) -> VariableLayout:
        """Return the decision-variable layout."""
        return VariableLayout(
            n_tau=len(self.input_matrices),
            n_hidden=self.stacked.n_hidden,
            n_pi=self.stacked.n_pi,
        )

    @property
    def size(self) -> int:
        """Return the side N_z + 1 + n_pi of the assembled matrix."""
        return self.stacked.size + self.stacked.n_pi

    def evaluate(self, x: NDArray[np.float64]) -> NDArray[np.float64]:
        """Return M at the packed variable vector x."""
        tau, multipliers, u, v = self.layout.unpack(x, self.free_nu, self.free_eta)
        return assemble(self.stacked, self.input_matrices, u, v, tau, multipliers)


@dataclass(frozen=True, eq=False)
class CertifiedBound:
    """Accepted certificate and the prediction ellipsoid it proves.

    U, V, tau and the multipliers belong to the recentered problem; the
    ellipsoid is already shifted back by ``output_offset``.
    """

    ellipsoid: Ellipsoid
    U: NDArray[np.float64]
    V: NDArray[np.float64]
    tau: NDArray[np.float64]
    multipliers: ReluQcMultipliers
    status: str
    objective: float
    max_eigenvalue: float
    margin: float
    solver: str = ""
    solve_time: float = 0.0
    output_offset: NDArray[np.float64] = field(default_factory=lambda: np.zeros(0))

    @property
    def log_volume(self) -> float:
        """Return the certified log-volume."""
        return log_volume(self.ellipsoid)

    def to_dict(self) -> dict[str, Any]:
        """Serialize to JSON: ellipsoid, status, objective and residuals."""
        return {
            "ellipsoid": self.ellipsoid.to_dict(),
            "status": self.status,
            "objective": self.objective,
            "log_volume": self.log_volume,
            "max_eigenvalue": self.max_eigenvalue,
            "margin": self.margin,
            "solver": self.solver,
            "solve_time": self.solve_time,
            "U": self.U.tolist(),
            "V": self.V.tolist(),
            "tau": self.tau.tolist(),
            "lambda": self.multipliers.lam.tolist(),
            "nu": self.multipliers.nu.tolist(),
            "eta": self.multipliers.eta.tolist(),
            "output_offset": self.output_offset.tolist(),
        }


def assemble(
    stacked: StackedForm,
    input_matrices: Sequence[NDArray[np.float64]],
    U: ArrayLike,
    V: ArrayLike,
    tau: ArrayLike,
    multipliers: ReluQcMultipliers,
) -> NDArray[np.float64]:
    """Return the bordered matrix [[sum tau_i M_i + M_mid - e e^T, F^T], [F, -I]]."""
    taus = np.asarray(tau, dtype=np.float64).reshape(-1)
    if taus.size != len(input_matrices):
        raise DimensionError(f"{taus.size} tau values for {len(input_matrices)} input QCs")
    n_pi, side = stacked.n_pi, stacked.size
    u = np.atleast_2d(np.asarray(U, dtype=np.float64))
    v = np.asarray(V, dtype=np.float64).reshape(-1)
    if u.shape != (n_pi, n_pi) or v.size != n_pi:
        raise DimensionError(f"U must be {n_pi}x{n_pi} and V of length {n_pi}")

    top = activation_qc(stacked, multipliers)
    for t, m in zip(taus, input_matrices, strict=True):
        if m.shape != (side, side):
            raise DimensionError(f"input QC is {m.shape}, expected {side}x{side}")
        top = top + t * m
    top[-1, -1] -= 1.0

    border = u @ output_lift(stacked)[:n_pi]
    border[:, -1] += v

    out = np.empty((side + n_pi, side + n_pi))
    out[:side, :side] = top
    out[side:, :side] = border
    out[:side, side:] = border.T
    out[side:, side:] = -np.eye(n_pi)
    return 0.5 * (out + out.T)


def affine_form(problem: LmiProblem, margin: float = 0.0) -> AffineLmi:
    """Expand M(x) = F_0 + sum_j x_j F_j by evaluating ``assemble`` at unit vectors."""
    layout = problem.layout
    m = layout.n_vars
    free = (
        np.ones(problem.stacked.n_hidden, dtype=bool),
        np.ones(problem.stacked.n_hidden, dtype=bool),
    )

    def evaluate(x: NDArray[np.float64]) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
        tau, multipliers, u, v = layout.unpack(x, *free)
        return assemble(problem.stacked, problem.input_matrices, u, v, tau, multipliers), u

    constant, u_constant = evaluate(np.zeros(m))
    coefficients = np.empty((m, problem.size, problem.size))
    u_coefficients = np.empty((m, layout.n_pi, layout.n_pi))
    for j in range(m):
        unit = np.zeros(m)
        unit[j] = 1.0
        mat, u = evaluate(unit)
        coefficients[j] = mat - constant
        u_coefficients[j] = u - u_constant

    return AffineLmi(
        constant=constant,
        coefficients=coefficients,
        nonneg=layout.nonneg_mask(problem.free_nu, problem.free_eta),
        u_constant=u_constant,
        u_coefficients=u_coefficients,
        objective=problem.objective,
        margin=margin,
        u_floor=problem.u_floor + margin,
        u_ceiling=problem.u_ceiling,
    )


def _objective_value(objective: str, u: NDArray[np.float64]) -> float:
    if objective == OBJECTIVE_LOGDET:
        return float(np.sum(np.log(np.linalg.eigvalsh(u))))
    return float(np.trace(u))


def _clip_signs(
    problem: LmiProblem, x: NDArray[np.float64]
) -> tuple[NDArray[np.float64], float]:
    """Clip the sign-constrained variables at zero; return the clipped x and the worst violation."""
    mask = problem.layout.nonneg_mask(problem.free_nu, problem.free_eta)
    worst = float(np.max(np.maximum(-x[mask], 0.0), initial=0.0))
    clipped = x.copy()
    clipped[mask] = np.maximum(clipped[mask], 0.0)
    return clipped, worst


def solve(problem: LmiProblem, backend: ConicBackend | None = None) -> CertifiedBound:
    """Solve the SDP and accept the certificate only after an independent re-check.

    The strictness margin is escalated when the recomputed lambda_max(M)
    exceeds the feasibility tolerance.
    """
    backend = backend or get_backend()
    layout = problem.layout
    last_status = "error"
    for margin in LMI_MARGIN_RETRIES:
        result = backend.submit(affine_form(problem, margin))
        last_status = result.status
        if result.status not in SOLVED_STATUSES or result.x is None:
            raise SolverError(
                f"{result.solver} returned {result.status} for a {layout.n_vars}-variable LMI",
                status=result.status,
            )

        x, violation = _clip_signs(problem, result.x)
        if violation > SIGN_TOL:
            _LOGGER.debug("Clipped sign violation of %.3e", violation)
        tau, multipliers, u, v = layout.unpack(x, problem.free_nu, problem.free_eta)
        matrix = assemble(problem.stacked, problem.input_matrices, u, v, tau, multipliers)
        max_eig = float(np.linalg.eigvalsh(matrix)[-1])
        min_u = float(np.linalg.eigvalsh(u)[0])
        _LOGGER.debug(
            "Certificate check at margin %.0e: lambda_max(M)=%.3e, lambda_min(U)=%.3e",
            margin,
            max_eig,
            min_u,
        )
        if max_eig <= problem.feasibility_tol and min_u >= problem.u_floor:
            u_inv = np.linalg.inv(u)
            ellipsoid = Ellipsoid(-u_inv @ v, u_inv @ u_inv)
            return CertifiedBound(
                ellipsoid=ellipsoid,
                U=u,
                V=v,
                tau=tau,
                multipliers=multipliers,
                status=result.status,
                objective=_objective_value(problem.objective, u),
                max_eigenvalue=max_eig,
                margin=margin,
                solver=result.solver,
                solve_time=result.solve_time,
                output_offset=np.zeros(layout.n_pi),
            )
        _LOGGER.warning(
            "Certificate rejected at margin %.0e (lambda_max(M)=%.3e, lambda_min(U)=%.3e)",
            margin,
            max_eig,
            min_u,
        )
    raise SolverError(
        f"no certificate passed the feasibility re-check (last solver status {last_status})",
        status="rejected",
    )


def _validate_inputs(net: ReluNetwork, ellipsoids: Sequence[Ellipsoid]) -> list[int]:
    if not ellipsoids:
        raise DimensionError("at least one input ellipsoid is required")
    sizes = [ell.dim for ell in ellipsoids]
    if sum(sizes) != net.input_dim:
        raise DimensionError(
            f"input ellipsoids cover {sum(sizes)} inputs, network expects {net.input_dim}"
        )
    return sizes


def _recentered(
    net: ReluNetwork, ellipsoids: Sequence[Ellipsoid]
) -> tuple[ReluNetwork, list[Ellipsoid], NDArray[np.float64]]:
    """Move the input centers and the output at the centers to the origin."""
    centers = np.concatenate([ell.center for ell in ellipsoids])
    offset = np.asarray(forward(net, centers), dtype=np.float64)
    shifted = net.shifted(centers, offset)
    centered = [Ellipsoid(np.zeros(ell.dim), ell.shape) for ell in ellipsoids]
    return shifted, centered, offset


def resolve_objective(objective: str, backend: ConicBackend) -> str:
    """Map ``auto`` to logdet when the backend can pose it, trace otherwise.

    Only logdet orders certificates by volume, so the per-block QCs dominate
    the stacked QC in log-volume under logdet alone.
    """
    if objective not in OBJECTIVE_CHOICES:
        raise DomainError(f"objective must be one of {OBJECTIVE_CHOICES}, got {objective!r}")
    if objective != OBJECTIVE_AUTO:
        return objective
    return OBJECTIVE_LOGDET if backend.supports_logdet else OBJECTIVE_TRACE


def pose_problem(
    net: ReluNetwork,
    ellipsoids: Sequence[Ellipsoid],
    *,
    single: bool = False,
    objective: str = OBJECTIVE_TRACE,
    use_interval_bounds: bool = False,
) -> tuple[LmiProblem, NDArray[np.float64]]:
    """Build the recentered SDP; return it with the output offset to add back."""
    sizes = _validate_inputs(net, ellipsoids)
    shifted, centered, offset = _recentered(net, ellipsoids)
    stacked = stack(shifted, sizes)
    if single:
        matrices: tuple[NDArray[np.float64], ...] = (single_input_qc(centered, stacked),)
    else:
        matrices = tuple(input_qcs(stacked, centered))

    free_nu = free_eta = None
    if use_interval_bounds:
        free_nu, free_eta = neuron_phases(interval_preactivation_bounds(shifted, centered))

    problem = LmiProblem(
        stacked=stacked,
        input_matrices=matrices,
        objective=objective,
        free_nu=free_nu,
        free_eta=free_eta,
    )
    return problem, offset


def _certify(
    net: ReluNetwork,
    ellipsoids: Sequence[Ellipsoid],
    *,
    single: bool,
    objective: str,
    backend: ConicBackend | None,
    use_interval_bounds: bool,
) -> CertifiedBound:
    backend = backend or get_backend()
    problem, offset = pose_problem(
        net,
        ellipsoids,
        single=single,
        objective=resolve_objective(objective, backend),
        use_interval_bounds=use_interval_bounds,
    )
    bound = solve(problem, backend)
    return CertifiedBound(
        ellipsoid=translate(bound.ellipsoid, offset),
        U=bound.U,
        V=bound.V,
        tau=bound.tau,
        multipliers=bound.multipliers,
        status=bound.status,
        objective=bound.objective,
        max_eigenvalue=bound.max_eigenvalue,
        margin=bound.margin,
        solver=bound.solver,
        solve_time=bound.solve_time,
        output_offset=offset,
    )


def certify(
    net: ReluNetwork,
    ellipsoids: Sequence[Ellipsoid],
    objective: str = OBJECTIVE_AUTO,
    backend: ConicBackend | None = None,
    use_interval_bounds: bool = False,
) -> CertifiedBound:
    """Bound every output reachable from the input ellipsoids, one QC per ellipsoid."""
    return _certify(
        net,
        ellipsoids,
        single=False,
        objective=objective,
        backend=backend,
        use_interval_bounds=use_interval_bounds,
    )


def certify_single(
    net: ReluNetwork,
    ellipsoids: Sequence[Ellipsoid],
    objective: str = OBJECTIVE_AUTO,
    backend: ConicBackend | None = None,
    use_interval_bounds: bool = False,
) -> CertifiedBound:
    """Same as :func:`certify` with the ellipsoids merged into one stacked QC (one tau)."""
    return _certify(
        net,
        ellipsoids,
        single=True,
        objective=objective,
        backend=backend,
        use_interval_bounds=use_interval_bounds,
    )


def monte_carlo_output_set(
    net: ReluNetwork,
    ellipsoids: Sequence[Ellipsoid],
    n_samples: int,
    rng: np.random.Generator,
) -> NDArray[np.float64]:
    """Return network outputs for inputs drawn uniformly from each ellipsoid's interior."""
    if n_samples < 1:
        raise DomainError(f"n_samples must be positive, got {n_samples}")
    _validate_inputs(net, ellipsoids)
    inputs = np.hstack([sample(ell, "interior", rng, size=n_samples) for ell in ellipsoids])
    return np.atleast_2d(forward(net, inputs))


def _triplets(block: int, matrix_index: int, matrix: NDArray[np.float64]) -> list[str]:
    rows, cols = np.nonzero(np.triu(matrix))
    return [
        f"{matrix_index} {block} {r + 1} {c + 1} {matrix[r, c]:.17g}"
        for r, c in zip(rows, cols, strict=True)
    ]


def dump_lmi_triplets(lmi: AffineLmi, path: str | os.PathLike[str]) -> Path:
    """Write the affine LMI as sparse triplets for external solver cross-checks.

    Header lines start with ``*``. Each data line is
    ``matrix block row col value`` with 1-based indices over the upper triangle;
    matrix 0 is the constant term and matrix j the coefficient of x_j. Block 1
    is M(x) <= -margin I and block 2 is U(x) with floor <= U <= ceiling.
    """
    lines = [
        "* narx-guard affine LMI",
        f"* n_vars {lmi.n_vars}",
        f"* blocks {lmi.size} {lmi.u_constant.shape[0]}",
        f"* objective {lmi.objective}",
        f"* margin {lmi.margin:.17g}",
        f"* u_floor {lmi.u_floor:.17g}",
        f"* u_ceiling {lmi.u_ceiling:.17g}",
        "* nonneg " + " ".join(str(j + 1) for j in np.flatnonzero(lmi.nonneg)),
    ]
    trace_weights = np.trace(lmi.u_coefficients, axis1=1, axis2=2)
    lines.append("* c " + " ".join(f"{w:.17g}" for w in trace_weights))
    lines.extend(_triplets(1, 0, lmi.constant))
    lines.extend(_triplets(2, 0, lmi.u_constant))
    for j in range(lmi.n_vars):
        lines.extend(_triplets(1, j + 1, lmi.coefficients[j]))
        lines.extend(_triplets(2, j + 1, lmi.u_coefficients[j]))
    return atomic_write_text(path, "\n".join(lines) + "\n")
