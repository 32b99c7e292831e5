"""Quadratic-constraint abstraction of a ReLU network.

The network is rewritten over the concatenated post-activation vector
z = [z^0; z^1; ...; z^l] as B z = relu(A z + b), and every set the certifier
reasons about becomes a quadratic form in [z; 1]:

* input QCs M_i, nonnegative when input block i lies in its ellipsoid,
* the ReLU QC M_mid(Q), nonnegative on every genuine forward pass,
* the output QC M_out, nonpositive exactly when the output lies in E(-U^-1 V, U^-2).
"""

from __future__ import annotations

import logging
from collections.abc import Sequence
from dataclasses import dataclass
from typing import Any

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .ellipsoid import Ellipsoid, interval_hull
from .exceptions import DimensionError, DomainError
from .relu_net import ReluNetwork

_LOGGER = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class StackedForm:
    """Concatenated representation of a ReLU network with a partitioned input."""

    A: NDArray[np.float64]
    B: NDArray[np.float64]
    b: NDArray[np.float64]
    S: tuple[NDArray[np.float64], ...]
    E: tuple[NDArray[np.float64], ...]
    W_out: NDArray[np.float64]
    b_out: NDArray[np.float64]
    input_sizes: tuple[int, ...]
    layer_sizes: tuple[int, ...]

    @property
    def q(self) -> int:
        """Return the number of input blocks."""
        return len(self.input_sizes)

    @property
    def n_gamma(self) -> int:
        """Return the total input width N_0."""
        return self.layer_sizes[0]

    @property
    def n_z(self) -> int:
        """Return N_z, the length of the concatenated activation vector."""
        return int(sum(self.layer_sizes))

    @property
    def n_hidden(self) -> int:
        """Return d, the number of hidden neurons."""
        return int(sum(self.layer_sizes[1:]))

    @property
    def n_pi(self) -> int:
        """Return the output width."""
        return int(self.W_out.shape[0])

    @property
    def size(self) -> int:
        """Return N_z + 1, the side of every QC matrix."""
        return self.n_z + 1

    def dims(self) -> dict[str, Any]:
        """Return the dimension summary."""
        return {
            "n_i": list(self.input_sizes),
            "n_gamma": self.n_gamma,
            "q": self.q,
            "N_t": list(self.layer_sizes),
            "N_z": self.n_z,
            "n_pi": self.n_pi,
        }


@dataclass(frozen=True, eq=False)
class ReluQcMultipliers:
    """Diagonal ReLU QC multipliers, one entry per hidden neuron.

    lambda weighs the complementarity y^2 = x y, nu weighs y >= x and eta weighs
    y >= 0. ``free_nu`` / ``free_eta`` mark neurons whose phase is known
    (always active / always inactive), for which the matching inequality holds
    with equality and the multiplier may take either sign.
    """

    lam: NDArray[np.float64]
    nu: NDArray[np.float64]
    eta: NDArray[np.float64]
    free_nu: NDArray[np.bool_] | None = None
    free_eta: NDArray[np.bool_] | None = None

    def __post_init__(self) -> None:
        sizes = {self.lam.size, self.nu.size, self.eta.size}
        if len(sizes) != 1:
            raise DimensionError(f"multiplier lengths differ: {sorted(sizes)}")
        free_nu = self._mask(self.free_nu)
        free_eta = self._mask(self.free_eta)
        if np.any((self.nu < 0.0) & ~free_nu):
            raise DomainError("nu multipliers must be nonnegative")
        if np.any((self.eta < 0.0) & ~free_eta):
            raise DomainError("eta multipliers must be nonnegative")

    def _mask(self, mask: NDArray[np.bool_] | None) -> NDArray[np.bool_]:
        if mask is None:
            return np.zeros(self.lam.size, dtype=bool)
        if mask.size != self.lam.size:
            raise DimensionError("phase mask length does not match the multipliers")
        return mask

    @property
    def size(self) -> int:
        """Return d."""
        return int(self.lam.size)

    @classmethod
    def zeros(cls, d: int) -> ReluQcMultipliers:
        """Return all-zero multipliers."""
        return cls(np.zeros(d), np.zeros(d), np.zeros(d))


def stack(net: ReluNetwork, input_sizes: Sequence[int]) -> StackedForm:
    """Build A, B, b, the layer selectors S^t and the input selectors E_i."""
    sizes = tuple(int(n) for n in input_sizes)
    if any(n < 1 for n in sizes) or sum(sizes) != net.input_dim:
        raise DimensionError(
            f"input partition {list(sizes)} does not cover the {net.input_dim} network inputs"
        )
    layers = tuple(net.arch[:-1])
    n_z = sum(layers)
    d = n_z - layers[0]
    offsets = np.concatenate(([0], np.cumsum(layers)))

    A = np.zeros((d, n_z))
    row = 0
    for t, w in enumerate(net.weights[:-1]):
        A[row : row + w.shape[0], offsets[t] : offsets[t + 1]] = w
        row += w.shape[0]
    B = np.hstack((np.zeros((d, layers[0])), np.eye(d)))
    b = np.concatenate(net.biases[:-1])

    S = []
    for t, width in enumerate(layers):
        sel = np.zeros((width, n_z))
        sel[:, offsets[t] : offsets[t + 1]] = np.eye(width)
        S.append(sel)

    E = []
    start = 0
    for n_i in sizes:
        sel = np.zeros((n_i + 1, n_z + 1))
        sel[:n_i, start : start + n_i] = np.eye(n_i)
        sel[n_i, n_z] = 1.0
        E.append(sel)
        start += n_i

    return StackedForm(
        A=A,
        B=B,
        b=b,
        S=tuple(S),
        E=tuple(E),
        W_out=np.array(net.weights[-1]),
        b_out=np.array(net.biases[-1]),
        input_sizes=sizes,
        layer_sizes=layers,
    )


def activation_vector(net: ReluNetwork, inputs: ArrayLike) -> NDArray[np.float64]:
    """Return the concatenated post-activation vector z of one forward pass."""
    z = np.asarray(inputs, dtype=np.float64).reshape(-1)
    if z.size != net.input_dim:
        raise DimensionError(f"input has dimension {z.size}, expected {net.input_dim}")
    parts = [z]
    for w, b in zip(net.weights[:-1], net.biases[:-1], strict=True):
        z = np.maximum(w @ z + b, 0.0)
        parts.append(z)
    return np.concatenate(parts)


def _ellipsoid_block(ellipsoid: Ellipsoid) -> NDArray[np.float64]:
    """Return [[-P, P mu], [mu^T P, -mu^T P mu + 1]] with P = Sigma^-1."""
    p = ellipsoid.precision
    pm = p @ ellipsoid.center
    n = ellipsoid.dim
    block = np.empty((n + 1, n + 1))
    block[:n, :n] = -p
    block[:n, n] = pm
    block[n, :n] = pm
    block[n, n] = 1.0 - float(ellipsoid.center @ pm)
    return block


def input_qc(selector: NDArray[np.float64], ellipsoid: Ellipsoid) -> NDArray[np.float64]:
    """Return M_i = E_i^T [[-P, P mu], [mu^T P, -mu^T P mu + 1]] E_i."""
    if selector.shape[0] != ellipsoid.dim + 1:
        raise DimensionError(
            f"selector extracts {selector.shape[0] - 1} inputs, ellipsoid has dimension "
            f"{ellipsoid.dim}"
        )
    m = selector.T @ _ellipsoid_block(ellipsoid) @ selector
    return 0.5 * (m + m.T)


def input_qcs(stacked: StackedForm, ellipsoids: Sequence[Ellipsoid]) -> list[NDArray[np.float64]]:
    """Return M_1, ..., M_q for one ellipsoid per input block."""
    if len(ellipsoids) != stacked.q:
        raise DimensionError(f"{len(ellipsoids)} ellipsoids for {stacked.q} input blocks")
    return [input_qc(sel, ell) for sel, ell in zip(stacked.E, ellipsoids, strict=True)]


def single_input_qc(
    ellipsoids: Sequence[Ellipsoid], stacked: StackedForm
) -> NDArray[np.float64]:
    """Return the QC of the overall bound sum_i (g_i - mu_i)^T P_i (g_i - mu_i) <= q.

    Block diagonal -P_i on the inputs, cross terms P_i mu_i, and corner
    q - sum_i mu_i^T P_i mu_i.
    """
    if len(ellipsoids) != stacked.q:
        raise DimensionError(f"{len(ellipsoids)} ellipsoids for {stacked.q} input blocks")
    n_z = stacked.n_z
    m = np.zeros((n_z + 1, n_z + 1))
    start = 0
    for n_i, ell in zip(stacked.input_sizes, ellipsoids, strict=True):
        if ell.dim != n_i:
            raise DimensionError(f"ellipsoid of dimension {ell.dim} for input block of {n_i}")
        p = ell.precision
        pm = p @ ell.center
        block = slice(start, start + n_i)
        m[block, block] = -p
        m[block, n_z] = pm
        m[n_z, block] = pm
        m[n_z, n_z] -= float(ell.center @ pm)
        start += n_i
    m[n_z, n_z] += stacked.q
    return m


def relu_q_matrix(m: ReluQcMultipliers) -> NDArray[np.float64]:
    """Return Q = [[0, diag(l), -nu], [diag(l), -2 diag(l), nu + eta], [-nu^T, (nu + eta)^T, 0]]."""
    d = m.size
    q = np.zeros((2 * d + 1, 2 * d + 1))
    lam = np.diag(m.lam)
    q[:d, d : 2 * d] = lam
    q[d : 2 * d, :d] = lam
    q[d : 2 * d, d : 2 * d] = -2.0 * lam
    q[:d, 2 * d] = -m.nu
    q[2 * d, :d] = -m.nu
    q[d : 2 * d, 2 * d] = m.nu + m.eta
    q[2 * d, d : 2 * d] = m.nu + m.eta
    return q


def activation_lift(stacked: StackedForm) -> NDArray[np.float64]:
    """Return [[A, b], [B, 0], [0, 1]], mapping [z; 1] to [x; y; 1]."""
    d, n_z = stacked.n_hidden, stacked.n_z
    lift = np.zeros((2 * d + 1, n_z + 1))
    lift[:d, :n_z] = stacked.A
    lift[:d, n_z] = stacked.b
    lift[d : 2 * d, :n_z] = stacked.B
    lift[2 * d, n_z] = 1.0
    return lift


def activation_qc(stacked: StackedForm, m: ReluQcMultipliers) -> NDArray[np.float64]:
    """Return M_mid(Q) = lift^T Q lift."""
    if m.size != stacked.n_hidden:
        raise DimensionError(f"{m.size} multipliers for {stacked.n_hidden} hidden neurons")
    lift = activation_lift(stacked)
    mid = lift.T @ relu_q_matrix(m) @ lift
    return 0.5 * (mid + mid.T)


def output_lift(stacked: StackedForm) -> NDArray[np.float64]:
    """Return [[W^l S^l, b^l], [0, 1]]."""
    n_pi, n_z = stacked.n_pi, stacked.n_z
    lift = np.zeros((n_pi + 1, n_z + 1))
    lift[:n_pi, :n_z] = stacked.W_out @ stacked.S[-1]
    lift[:n_pi, n_z] = stacked.b_out
    lift[n_pi, n_z] = 1.0
    return lift


def output_qc(
    stacked: StackedForm, U: ArrayLike, V: ArrayLike
) -> NDArray[np.float64]:
    """Return M_out = G^T [[U^2, U V], [V^T U, V^T V - 1]] G."""
    u = np.atleast_2d(np.asarray(U, dtype=np.float64))
    v = np.asarray(V, dtype=np.float64).reshape(-1)
    n_pi = stacked.n_pi
    if u.shape != (n_pi, n_pi) or v.size != n_pi:
        raise DimensionError(f"U must be {n_pi}x{n_pi} and V of length {n_pi}")
    u = 0.5 * (u + u.T)
    core = np.empty((n_pi + 1, n_pi + 1))
    core[:n_pi, :n_pi] = u @ u
    core[:n_pi, n_pi] = u @ v
    core[n_pi, :n_pi] = u @ v
    core[n_pi, n_pi] = float(v @ v) - 1.0
    lift = output_lift(stacked)
    out = lift.T @ core @ lift
    return 0.5 * (out + out.T)


def output_ellipsoid(U: ArrayLike, V: ArrayLike) -> Ellipsoid:
    """Return E(-U^-1 V, U^-2)."""
    u = np.atleast_2d(np.asarray(U, dtype=np.float64))
    u = 0.5 * (u + u.T)
    v = np.asarray(V, dtype=np.float64).reshape(-1)
    eigvals = np.linalg.eigvalsh(u)
    if np.min(np.abs(eigvals)) <= 1e-12 * max(1.0, float(np.max(np.abs(eigvals)))):
        raise DomainError("U is singular; the output ellipsoid is unbounded")
    u_inv = np.linalg.inv(u)
    return Ellipsoid(-u_inv @ v, u_inv @ u_inv)


def quadratic_form(matrix: NDArray[np.float64], z: ArrayLike) -> float:
    """Return [z; 1]^T matrix [z; 1]."""
    lifted = np.append(np.asarray(z, dtype=np.float64).reshape(-1), 1.0)
    return float(lifted @ matrix @ lifted)


def interval_preactivation_bounds(
    net: ReluNetwork, ellipsoids: Sequence[Ellipsoid]
) -> list[tuple[NDArray[np.float64], NDArray[np.float64]]]:
    """Propagate the ellipsoids' bounding boxes through the network.

    Returns (lower, upper) pre-activation bounds per hidden layer.
    """
    boxes = [interval_hull(ell) for ell in ellipsoids]
    lower = np.concatenate([lo for lo, _ in boxes])
    upper = np.concatenate([hi for _, hi in boxes])
    if lower.size != net.input_dim:
        raise DimensionError(f"ellipsoids cover {lower.size} inputs, network has {net.input_dim}")
    bounds = []
    for w, b in zip(net.weights[:-1], net.biases[:-1], strict=True):
        mid = 0.5 * (lower + upper)
        rad = 0.5 * (upper - lower)
        pre_mid = w @ mid + b
        pre_rad = np.abs(w) @ rad
        pre_lo, pre_hi = pre_mid - pre_rad, pre_mid + pre_rad
        bounds.append((pre_lo, pre_hi))
        lower, upper = np.maximum(pre_lo, 0.0), np.maximum(pre_hi, 0.0)
    return bounds


def neuron_phases(
    bounds: Sequence[tuple[NDArray[np.float64], NDArray[np.float64]]],
) -> tuple[NDArray[np.bool_], NDArray[np.bool_]]:
    """Return (always_active, always_inactive) masks over all hidden neurons."""
    lower = np.concatenate([lo for lo, _ in bounds])
    upper = np.concatenate([hi for _, hi in bounds])
    active = lower >= 0.0
    inactive = upper <= 0.0
    _LOGGER.debug(
        "Interval bounds fix %d active and %d inactive of %d neurons",
        int(active.sum()),
        int(inactive.sum()),
        lower.size,
    )
    return active, inactive


def qc_bundle(
    stacked: StackedForm,
    input_matrices: Sequence[NDArray[np.float64]],
    mid: NDArray[np.float64] | None = None,
    out: NDArray[np.float64] | None = None,
) -> dict[str, Any]:
    """Return every QC matrix as a JSON-ready debug bundle."""
    bundle: dict[str, Any] = {
        "dims": stacked.dims(),
        "A": stacked.A.tolist(),
        "B": stacked.B.tolist(),
        "b": stacked.b.tolist(),
        "M_in": [m.tolist() for m in input_matrices],
    }
    if mid is not None:
        bundle["M_mid"] = mid.tolist()
    if out is not None:
        bundle["M_out"] = out.tolist()
    return bundle
