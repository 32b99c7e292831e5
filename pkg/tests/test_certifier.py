"""Tests for the SDP certifier."""

from __future__ import annotations

from pathlib import Path
from typing import Any

import numpy as np
import pytest

from narx_guard.backend import SOLVED_STATUSES, ConicBackend, get_backend
from narx_guard.certifier import (
    LmiProblem,
    VariableLayout,
    affine_form,
    assemble,
    certify,
    certify_single,
    dump_lmi_triplets,
    monte_carlo_output_set,
    pose_problem,
    resolve_objective,
)
from narx_guard.const import ENV_BACKEND, OBJECTIVE_AUTO, OBJECTIVE_LOGDET, OBJECTIVE_TRACE
from narx_guard.ellipsoid import Ellipsoid, boundary_points, contains, log_volume
from narx_guard.exceptions import (
    BackendUnavailableError,
    DimensionError,
    DomainError,
    SolverError,
)
from narx_guard.qc import (
    ReluQcMultipliers,
    activation_qc,
    input_qcs,
    output_qc,
    stack,
)
from narx_guard.relu_net import ReluNetwork, forward

from .conftest import InfeasibleBackend, NetworkFactory, ZeroBackend

BOUND_TOL = 1e-7
# log-volume slack when comparing two certified bounds
VOLUME_TOL = 1e-6


def _ellipsoids(rng: np.random.Generator, q: int, scale: float = 0.1) -> list[Ellipsoid]:
    return [Ellipsoid(rng.normal(size=2), scale * np.eye(2)) for _ in range(q)]


def _problem(net: ReluNetwork, ellipsoids: list[Ellipsoid], **kwargs: Any) -> LmiProblem:
    stacked = stack(net, [e.dim for e in ellipsoids])
    return LmiProblem(stacked, tuple(input_qcs(stacked, ellipsoids)), **kwargs)


def _random_variables(layout: VariableLayout, rng: np.random.Generator) -> np.ndarray:
    d = layout.n_hidden
    multipliers = ReluQcMultipliers(
        rng.normal(size=d), rng.uniform(0.0, 1.0, d), rng.uniform(0.0, 1.0, d)
    )
    u = rng.normal(size=(layout.n_pi, layout.n_pi))
    return layout.pack(
        rng.uniform(0.0, 1.0, layout.n_tau),
        multipliers,
        u + u.T,
        rng.normal(size=layout.n_pi),
    )


def test_layout_counts_and_pack_inverse(rng: np.random.Generator) -> None:
    layout = VariableLayout(n_tau=2, n_hidden=15, n_pi=2)

    assert layout.n_u == 3
    assert layout.n_vars == 2 + 45 + 3 + 2
    assert layout.counts() == {"tau": 2, "lambda": 15, "nu": 15, "eta": 15, "U": 3, "V": 2}

    x = _random_variables(layout, rng)
    tau, multipliers, u, v = layout.unpack(x)
    np.testing.assert_array_equal(layout.pack(tau, multipliers, u, v), x)
    np.testing.assert_array_equal(u, u.T)
    with pytest.raises(DimensionError):
        layout.unpack(x[:-1])


def test_nonneg_mask_respects_phase_masks() -> None:
    layout = VariableLayout(n_tau=1, n_hidden=2, n_pi=1)

    mask = layout.nonneg_mask(np.array([True, False]), None)

    # tau | lambda lambda | nu nu | eta eta | U | V
    np.testing.assert_array_equal(
        mask, [True, False, False, False, True, True, True, False, False]
    )


def test_problem_size(make_network: NetworkFactory, rng: np.random.Generator) -> None:
    problem = _problem(make_network([4, 10, 5, 2]), _ellipsoids(rng, 2))

    assert problem.size == 22
    assert problem.layout.n_tau == 2


def test_problem_validation(make_network: NetworkFactory, rng: np.random.Generator) -> None:
    net = make_network([4, 6, 2])
    with pytest.raises(DomainError):
        _problem(net, _ellipsoids(rng, 2), objective="volume")
    with pytest.raises(DimensionError):
        LmiProblem(stack(net, [2, 2]), ())
    with pytest.raises(DomainError):
        _problem(net, _ellipsoids(rng, 2), u_floor=1.0, u_ceiling=0.5)


def test_schur_complement_is_the_combined_qc(
    make_network: NetworkFactory, rng: np.random.Generator
) -> None:
    net = make_network([4, 6, 3, 2])
    problem = _problem(net, _ellipsoids(rng, 2))
    side = problem.stacked.size

    for _ in range(50):
        x = _random_variables(problem.layout, rng)
        tau, multipliers, u, v = problem.layout.unpack(x)
        matrix = problem.evaluate(x)
        top, border = matrix[:side, :side], matrix[side:, :side]

        schur = top + border.T @ border
        expected = sum(t * m for t, m in zip(tau, problem.input_matrices, strict=True))
        expected = expected + activation_qc(problem.stacked, multipliers)
        expected = expected + output_qc(problem.stacked, u, v)
        np.testing.assert_allclose(schur, expected, atol=1e-9)

        # The -I block contributes exactly n_pi negative eigenvalues.
        positive = int(np.sum(np.linalg.eigvalsh(matrix) > 1e-9))
        assert positive == int(np.sum(np.linalg.eigvalsh(schur) > 1e-9))


def test_assembled_matrix_is_affine(
    make_network: NetworkFactory, rng: np.random.Generator
) -> None:
    problem = _problem(make_network([4, 5, 2]), _ellipsoids(rng, 2))
    x = _random_variables(problem.layout, rng)
    y = _random_variables(problem.layout, rng)

    for a in (0.0, 0.3, 1.0):
        np.testing.assert_allclose(
            problem.evaluate(a * x + (1.0 - a) * y),
            a * problem.evaluate(x) + (1.0 - a) * problem.evaluate(y),
            atol=1e-10,
        )


def test_affine_form_matches_direct_assembly(
    make_network: NetworkFactory, rng: np.random.Generator
) -> None:
    problem = _problem(make_network([4, 5, 2]), _ellipsoids(rng, 2))

    lmi = affine_form(problem, margin=1e-5)

    assert lmi.n_vars == problem.layout.n_vars
    assert lmi.u_floor == pytest.approx(problem.u_floor + 1e-5)
    for _ in range(5):
        x = _random_variables(problem.layout, rng)
        np.testing.assert_allclose(lmi.evaluate(x), problem.evaluate(x), atol=1e-10)
        _, _, u, _ = problem.layout.unpack(x)
        np.testing.assert_allclose(
            lmi.u_constant + np.tensordot(x, lmi.u_coefficients, axes=1), u, atol=1e-12
        )


def test_zero_variables_are_only_semidefinite(
    make_network: NetworkFactory, rng: np.random.Generator
) -> None:
    problem = _problem(make_network([4, 5, 2]), _ellipsoids(rng, 2))

    eigenvalues = np.linalg.eigvalsh(problem.evaluate(np.zeros(problem.layout.n_vars)))

    assert eigenvalues[-1] == pytest.approx(0.0, abs=1e-12)


def test_assemble_rejects_mismatched_tau(
    make_network: NetworkFactory, rng: np.random.Generator
) -> None:
    problem = _problem(make_network([4, 5, 2]), _ellipsoids(rng, 2))

    with pytest.raises(DimensionError):
        assemble(
            problem.stacked,
            problem.input_matrices,
            np.eye(2),
            np.zeros(2),
            [1.0],
            ReluQcMultipliers.zeros(5),
        )


def test_dump_lmi_triplets(
    make_network: NetworkFactory, rng: np.random.Generator, tmp_path: Path
) -> None:
    problem = _problem(make_network([4, 3, 2]), _ellipsoids(rng, 2))
    lmi = affine_form(problem)

    path = dump_lmi_triplets(lmi, tmp_path / "lmi.txt")

    lines = path.read_text(encoding="utf-8").splitlines()
    header = {line.split()[1]: line.split()[2:] for line in lines if line.startswith("*")}
    assert header["n_vars"] == [str(lmi.n_vars)]
    assert header["blocks"] == [str(lmi.size), "2"]
    assert header["nonneg"][0] == "1"
    assert len(header["c"]) == lmi.n_vars

    rebuilt = np.zeros((lmi.size, lmi.size))
    for line in lines:
        if line.startswith("*"):
            continue
        matrix, block, row, col, value = line.split()
        assert int(row) <= int(col)
        if matrix == "0" and block == "1":
            rebuilt[int(row) - 1, int(col) - 1] = float(value)
    np.testing.assert_array_equal(np.triu(rebuilt), np.triu(lmi.constant))


def test_infeasible_backend_raises_solver_error(
    make_network: NetworkFactory, rng: np.random.Generator
) -> None:
    with pytest.raises(SolverError) as err:
        certify(make_network([4, 5, 2]), _ellipsoids(rng, 2), backend=InfeasibleBackend())

    assert err.value.status == "infeasible"


def test_rejected_certificate_escalates_margin(
    make_network: NetworkFactory, rng: np.random.Generator
) -> None:
    backend = ZeroBackend()

    with pytest.raises(SolverError) as err:
        certify(make_network([4, 5, 2]), _ellipsoids(rng, 2), backend=backend)

    assert err.value.status == "rejected"
    assert backend.calls == 3


def test_logdet_needs_capable_backend(
    make_network: NetworkFactory, rng: np.random.Generator
) -> None:
    with pytest.raises(BackendUnavailableError):
        certify(
            make_network([4, 5, 2]),
            _ellipsoids(rng, 2),
            objective=OBJECTIVE_LOGDET,
            backend=ZeroBackend(),
        )


def test_auto_objective_follows_backend_capability() -> None:
    assert resolve_objective(OBJECTIVE_AUTO, InfeasibleBackend()) == OBJECTIVE_LOGDET
    assert resolve_objective(OBJECTIVE_AUTO, ZeroBackend()) == OBJECTIVE_TRACE
    assert resolve_objective(OBJECTIVE_TRACE, InfeasibleBackend()) == OBJECTIVE_TRACE
    with pytest.raises(DomainError):
        resolve_objective("volume", InfeasibleBackend())


def test_pose_problem_counts_input_qcs(
    make_network: NetworkFactory, rng: np.random.Generator
) -> None:
    net = make_network([6, 5, 2])
    ellipsoids = _ellipsoids(rng, 3)

    multi, offset = pose_problem(net, ellipsoids)
    single, _ = pose_problem(net, ellipsoids, single=True, objective=OBJECTIVE_LOGDET)

    assert len(multi.input_matrices) == 3
    assert len(single.input_matrices) == 1
    assert single.objective == OBJECTIVE_LOGDET
    centers = np.concatenate([e.center for e in ellipsoids])
    np.testing.assert_allclose(offset, forward(net, centers))


def test_certify_rejects_partition_mismatch(
    make_network: NetworkFactory, rng: np.random.Generator
) -> None:
    with pytest.raises(DimensionError):
        certify(make_network([4, 5, 2]), _ellipsoids(rng, 3), backend=InfeasibleBackend())
    with pytest.raises(DimensionError):
        certify(make_network([4, 5, 2]), [], backend=InfeasibleBackend())


def test_unknown_backend(monkeypatch: pytest.MonkeyPatch) -> None:
    with pytest.raises(BackendUnavailableError):
        get_backend("mystery")

    monkeypatch.setenv(ENV_BACKEND, "mystery:SOLVER")
    with pytest.raises(BackendUnavailableError):
        get_backend()


def test_monte_carlo_output_set(make_network: NetworkFactory, rng: np.random.Generator) -> None:
    net = make_network([4, 5, 2])

    outputs = monte_carlo_output_set(net, _ellipsoids(rng, 2), 100, rng)

    assert outputs.shape == (100, 2)
    with pytest.raises(DomainError):
        monte_carlo_output_set(net, _ellipsoids(rng, 2), 0, rng)


# Solver-backed checks


def test_constant_network_gives_tiny_bound(solver: ConicBackend) -> None:
    net = ReluNetwork([np.ones((3, 2)), np.zeros((2, 3))], [np.zeros(3), [1.0, -2.0]])
    ellipsoid = Ellipsoid([0.5, 0.5], 0.1 * np.eye(2))

    bound = certify(net, [ellipsoid], backend=solver)

    assert contains(bound.ellipsoid, [1.0, -2.0]).inside
    np.testing.assert_allclose(bound.output_offset, [1.0, -2.0])
    assert bound.log_volume < -5.0


def test_identity_region_is_contained(
    identity_network: ReluNetwork, solver: ConicBackend
) -> None:
    ellipsoid = Ellipsoid([5.0, 5.0], [[0.2, 0.05], [0.05, 0.1]])

    bound = certify(identity_network, [ellipsoid], objective=OBJECTIVE_LOGDET, backend=solver)

    for point in boundary_points(ellipsoid, 32):
        assert bound.ellipsoid.mahalanobis(point) <= 1.0 + BOUND_TOL
    assert bound.log_volume >= log_volume(ellipsoid) - BOUND_TOL


@pytest.mark.parametrize("use_interval_bounds", [False, True])
def test_certified_bound_contains_sampled_outputs(
    make_network: NetworkFactory,
    rng: np.random.Generator,
    solver: ConicBackend,
    use_interval_bounds: bool,
) -> None:
    net = make_network([4, 10, 5, 2])
    ellipsoids = _ellipsoids(rng, 2)

    bound = certify(net, ellipsoids, backend=solver, use_interval_bounds=use_interval_bounds)

    outputs = monte_carlo_output_set(net, ellipsoids, 2000, rng)
    margins = [bound.ellipsoid.mahalanobis(y) for y in outputs]
    assert max(margins) <= 1.0 + BOUND_TOL


def test_certificate_invariants(
    make_network: NetworkFactory, rng: np.random.Generator, solver: ConicBackend
) -> None:
    net = make_network([4, 6, 2])
    ellipsoids = _ellipsoids(rng, 2)

    bound = certify(net, ellipsoids, backend=solver)

    assert bound.status in SOLVED_STATUSES
    assert bound.max_eigenvalue <= 1e-7
    assert np.linalg.eigvalsh(bound.U)[0] >= 1e-6
    assert np.all(bound.tau >= 0.0)
    assert np.all(bound.multipliers.nu >= 0.0)
    assert np.all(bound.multipliers.eta >= 0.0)
    centers = np.concatenate([e.center for e in ellipsoids])
    np.testing.assert_allclose(bound.output_offset, forward(net, centers))
    assert bound.to_dict()["status"] == bound.status


def test_single_qc_matches_for_one_input(
    make_network: NetworkFactory, rng: np.random.Generator, solver: ConicBackend
) -> None:
    net = make_network([2, 6, 2])
    ellipsoids = _ellipsoids(rng, 1)

    multi = certify(net, ellipsoids, backend=solver)
    single = certify_single(net, ellipsoids, backend=solver)

    assert multi.log_volume == pytest.approx(single.log_volume, abs=VOLUME_TOL)


def test_per_block_qcs_dominate_the_stacked_qc(
    make_network: NetworkFactory, rng: np.random.Generator, solver: ConicBackend
) -> None:
    net = make_network([6, 8, 2])
    ellipsoids = _ellipsoids(rng, 3)

    multi = certify(net, ellipsoids, objective=OBJECTIVE_LOGDET, backend=solver)
    single = certify_single(net, ellipsoids, objective=OBJECTIVE_LOGDET, backend=solver)

    assert multi.log_volume <= single.log_volume + VOLUME_TOL


def test_smaller_inputs_never_grow_the_bound(
    make_network: NetworkFactory, rng: np.random.Generator, solver: ConicBackend
) -> None:
    net = make_network([4, 8, 2])
    wide = _ellipsoids(rng, 2, scale=0.2)
    narrow = [Ellipsoid(e.center, 0.25 * e.shape) for e in wide]

    wide_bound = certify(net, wide, objective=OBJECTIVE_LOGDET, backend=solver)
    narrow_bound = certify(net, narrow, objective=OBJECTIVE_LOGDET, backend=solver)

    assert narrow_bound.log_volume <= wide_bound.log_volume + VOLUME_TOL


@pytest.mark.parametrize("seed", range(15))
def test_default_objective_keeps_per_block_dominance(seed: int, solver: ConicBackend) -> None:
    rng = np.random.default_rng(seed)
    weights = [rng.normal(scale=0.5, size=(8, 4)), rng.normal(scale=0.35, size=(2, 8))]
    biases = [rng.normal(scale=0.1, size=8), rng.normal(scale=0.1, size=2)]
    net = ReluNetwork(weights, biases)
    ellipsoids = _ellipsoids(rng, 2)

    multi = certify(net, ellipsoids, backend=solver)
    single = certify_single(net, ellipsoids, backend=solver)

    assert multi.log_volume <= single.log_volume + VOLUME_TOL
