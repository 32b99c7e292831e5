"""Ellipsoids E(mu, Sigma) = {xi : (xi - mu)^T Sigma^-1 (xi - mu) <= 1} and their set operations."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Any, Literal

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy import linalg
from scipy.optimize import brentq
from scipy.special import gammainc

from .const import (
    MEMBERSHIP_TOL,
    MIN_EIGENVALUE,
    ROOT_MAX_BRACKET_DOUBLINGS,
    ROOT_TOL,
    SYMMETRY_TOL,
)
from .exceptions import DimensionError, DomainError, NumericalError

_LOGGER = logging.getLogger(__name__)

SampleMode = Literal["interior", "boundary"]


def _frozen(array: NDArray[np.float64]) -> NDArray[np.float64]:
    array.setflags(write=False)
    return array


@dataclass(frozen=True, eq=False)
class Ellipsoid:
    """Ellipsoid with center mu and symmetric positive-definite shape matrix Sigma.

    The shape is symmetrized on construction and its Cholesky factor cached, so
    membership tests and sampling never re-factorize.
    """

    center: NDArray[np.float64]
    shape: NDArray[np.float64]
    _chol: NDArray[np.float64] = field(init=False, repr=False)

    def __init__(self, center: ArrayLike, shape: ArrayLike) -> None:
        """Validate and freeze the center and shape."""
        mu = np.array(center, dtype=np.float64).reshape(-1)
        sigma = np.array(shape, dtype=np.float64)
        if sigma.ndim != 2 or sigma.shape[0] != sigma.shape[1]:
            raise DimensionError(f"shape must be square, got {sigma.shape}")
        if sigma.shape[0] != mu.size:
            raise DimensionError(
                f"center has dimension {mu.size} but shape is {sigma.shape[0]}x{sigma.shape[1]}"
            )
        if not (np.all(np.isfinite(mu)) and np.all(np.isfinite(sigma))):
            raise DomainError("ellipsoid center and shape must be finite")
        asymmetry = float(np.max(np.abs(sigma - sigma.T)))
        if asymmetry > SYMMETRY_TOL:
            _LOGGER.debug("Symmetrizing shape matrix (asymmetry %.3e)", asymmetry)
        sigma = 0.5 * (sigma + sigma.T)
        min_eig = float(np.linalg.eigvalsh(sigma)[0])
        if min_eig <= MIN_EIGENVALUE:
            raise DomainError(f"shape is not positive definite (minimum eigenvalue {min_eig:.3e})")
        object.__setattr__(self, "center", _frozen(mu))
        object.__setattr__(self, "shape", _frozen(sigma))
        object.__setattr__(self, "_chol", _frozen(linalg.cholesky(sigma, lower=True)))

    @property
    def dim(self) -> int:
        """Return the ambient dimension."""
        return int(self.center.size)

    @property
    def precision(self) -> NDArray[np.float64]:
        """Return Sigma^-1."""
        inv = linalg.cho_solve((self._chol, True), np.eye(self.dim))
        return 0.5 * (inv + inv.T)

    @property
    def cholesky(self) -> NDArray[np.float64]:
        """Return the lower Cholesky factor L with L L^T = Sigma."""
        return self._chol

    def mahalanobis(self, point: ArrayLike) -> float:
        """Return (xi - mu)^T Sigma^-1 (xi - mu)."""
        xi = _as_point(point, self.dim)
        w = linalg.solve_triangular(self._chol, xi - self.center, lower=True)
        return float(w @ w)

    def to_dict(self) -> dict[str, Any]:
        """Serialize to the {center, shape} JSON object."""
        return {"center": self.center.tolist(), "shape": self.shape.tolist()}

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> Ellipsoid:
        """Build from the {center, shape} JSON object."""
        try:
            return cls(data["center"], data["shape"])
        except KeyError as err:
            raise DimensionError(f"ellipsoid object is missing {err}") from err

    def __repr__(self) -> str:
        return f"Ellipsoid(center={self.center.tolist()}, shape={self.shape.tolist()})"


@dataclass(frozen=True)
class Membership:
    """Result of a point membership test."""

    inside: bool
    margin: float


@dataclass(frozen=True)
class MinkowskiMembership:
    """Result of a Minkowski-sum membership test.

    ``margin`` is the smallest value of (d - s)^T Sigma1^-1 (d - s) over s in the
    second ellipsoid, so the point is inside the sum iff margin <= 1.
    """

    inside: bool
    kappa: float
    margin: float


@dataclass(frozen=True, eq=False)
class ConfidenceSpec:
    """Sensor-noise confidence set: Sigma_v scaled by the chi-squared quantile alpha."""

    p_bar: float
    p: int
    sigma_v: NDArray[np.float64]
    alpha: float
    sigma_v_bar: NDArray[np.float64]

    def __post_init__(self) -> None:
        if not 0.0 < self.p_bar < 1.0:
            raise DomainError(f"p_bar must lie in (0, 1), got {self.p_bar}")
        if self.sigma_v.shape != (self.p, self.p):
            raise DimensionError(f"sigma_v must be {self.p}x{self.p}, got {self.sigma_v.shape}")
        if not np.allclose(self.sigma_v_bar, self.alpha * self.sigma_v, rtol=1e-10, atol=0.0):
            raise DomainError("sigma_v_bar must equal alpha * sigma_v")

    @classmethod
    def build(cls, sigma_v: ArrayLike, p_bar: float) -> ConfidenceSpec:
        """Derive alpha and the scaled covariance from Sigma_v and p_bar."""
        cov = Ellipsoid(np.zeros(np.shape(sigma_v)[0]), sigma_v).shape.copy()
        alpha = confidence_scale(cov.shape[0], p_bar)
        return cls(
            p_bar=float(p_bar),
            p=cov.shape[0],
            sigma_v=_frozen(cov),
            alpha=alpha,
            sigma_v_bar=_frozen(alpha * cov),
        )


def _as_point(point: ArrayLike, dim: int) -> NDArray[np.float64]:
    xi = np.asarray(point, dtype=np.float64).reshape(-1)
    if xi.size != dim:
        raise DimensionError(f"point has dimension {xi.size}, expected {dim}")
    return xi


def confidence_scale(p: int, p_bar: float) -> float:
    """Return alpha = 2 * P^-1(p/2, p_bar), the p_bar-quantile of chi-squared(p).

    P is the regularized lower incomplete gamma function; the root is found by
    bracketed Brent iteration on P(p/2, alpha/2) - p_bar.
    """
    if p < 1:
        raise DomainError(f"sensor dimension must be positive, got {p}")
    if not 0.0 < p_bar < 1.0:
        raise DomainError(f"p_bar must lie in (0, 1), got {p_bar}")

    half = 0.5 * p

    def residual(alpha: float) -> float:
        return float(gammainc(half, 0.5 * alpha)) - p_bar

    upper = 2.0 * p + 2.0
    for _ in range(ROOT_MAX_BRACKET_DOUBLINGS):
        if residual(upper) >= 0.0:
            break
        upper *= 2.0
    else:
        raise NumericalError(f"could not bracket chi-squared quantile for p={p}, p_bar={p_bar}")

    alpha, info = brentq(residual, 0.0, upper, xtol=ROOT_TOL, full_output=True, disp=False)
    if not info.converged:
        raise NumericalError(
            f"chi-squared quantile did not converge (residual {residual(alpha):.3e}, "
            f"{info.iterations} iterations)"
        )
    return float(alpha)


def confidence_ellipsoid(spec: ConfidenceSpec, center: ArrayLike) -> Ellipsoid:
    """Return E(center, alpha * Sigma_v)."""
    mu = np.asarray(center, dtype=np.float64).reshape(-1)
    if mu.size != spec.p:
        raise DimensionError(f"center has dimension {mu.size}, expected {spec.p}")
    return Ellipsoid(mu, spec.sigma_v_bar)


def contains(ellipsoid: Ellipsoid, point: ArrayLike) -> Membership:
    """Test xi in E with the non-strict boundary convention."""
    margin = ellipsoid.mahalanobis(point)
    return Membership(inside=margin <= 1.0 + MEMBERSHIP_TOL, margin=margin)


def affine_image(ellipsoid: Ellipsoid, W: ArrayLike, b: ArrayLike) -> Ellipsoid:
    """Return the exact image E(W mu + b, W Sigma W^T) of E under xi -> W xi + b."""
    mat = np.atleast_2d(np.asarray(W, dtype=np.float64))
    offset = np.asarray(b, dtype=np.float64).reshape(-1)
    if mat.shape[1] != ellipsoid.dim:
        raise DimensionError(f"W has {mat.shape[1]} columns, expected {ellipsoid.dim}")
    if offset.size != mat.shape[0]:
        raise DimensionError(f"b has dimension {offset.size}, expected {mat.shape[0]}")
    if np.linalg.matrix_rank(mat) < mat.shape[0]:
        raise DomainError("W must have full row rank for a non-degenerate image")
    return Ellipsoid(mat @ ellipsoid.center + offset, mat @ ellipsoid.shape @ mat.T)


def translate(ellipsoid: Ellipsoid, offset: ArrayLike) -> Ellipsoid:
    """Return E(mu + offset, Sigma)."""
    return Ellipsoid(ellipsoid.center + _as_point(offset, ellipsoid.dim), ellipsoid.shape)


def minkowski_contains(
    first: Ellipsoid, second: Ellipsoid, point: ArrayLike
) -> MinkowskiMembership:
    """Decide point in first (+) second exactly.

    With d = point - mu1 - mu2 the question is whether some s in E(0, Sigma2)
    has (d - s)^T Sigma1^-1 (d - s) <= 1. The minimizer over the boundary of
    E(0, Sigma2) is s(kappa) = (P1 + kappa P2)^-1 P1 d with P = Sigma^-1, and
    kappa solves s^T P2 s = 1. Simultaneous diagonalization of (P2, P1) turns
    that into a scalar monotone equation.
    """
    if first.dim != second.dim:
        raise DimensionError(f"ellipsoid dimensions differ: {first.dim} vs {second.dim}")
    xi = _as_point(point, first.dim)
    d = xi - first.center - second.center

    p1 = first.precision
    weights, basis = linalg.eigh(second.precision, p1)
    coords = basis.T @ p1 @ d
    weighted = weights * coords**2

    if float(np.sum(weighted)) <= 1.0:
        return MinkowskiMembership(inside=True, kappa=0.0, margin=0.0)

    def excess(kappa: float) -> float:
        return float(np.sum(weighted / (1.0 + kappa * weights) ** 2)) - 1.0

    upper = 1.0
    for _ in range(ROOT_MAX_BRACKET_DOUBLINGS):
        if excess(upper) <= 0.0:
            break
        upper *= 2.0
    else:
        raise NumericalError(
            f"Minkowski multiplier bracket failed (upper={upper:.3e}, excess={excess(upper):.3e})"
        )
    _LOGGER.debug("Minkowski multiplier bracketed in [0, %s]", upper)

    kappa, info = brentq(excess, 0.0, upper, xtol=ROOT_TOL, full_output=True, disp=False)
    if not info.converged:
        raise NumericalError(
            f"Minkowski multiplier did not converge (kappa={kappa:.6e}, "
            f"excess={excess(kappa):.3e}, bracket=[0, {upper:.3e}])"
        )
    shrink = kappa * weights / (1.0 + kappa * weights)
    margin = float(np.sum((shrink * coords) ** 2))
    return MinkowskiMembership(
        inside=margin <= 1.0 + MEMBERSHIP_TOL, kappa=float(kappa), margin=margin
    )


def log_volume(ellipsoid: Ellipsoid) -> float:
    """Return (1/2) logdet(Sigma), the log-volume up to the unit-ball constant."""
    return float(np.sum(np.log(np.diag(ellipsoid.cholesky))))


def sample(
    ellipsoid: Ellipsoid,
    mode: SampleMode,
    rng: np.random.Generator,
    size: int | None = None,
) -> NDArray[np.float64]:
    """Draw uniform points from the interior or the boundary of E.

    Returns one vector when ``size`` is None, otherwise a (size, d) array.
    """
    count = 1 if size is None else size
    dim = ellipsoid.dim
    directions = rng.standard_normal((count, dim))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    if mode == "interior":
        directions *= rng.random((count, 1)) ** (1.0 / dim)
    elif mode != "boundary":
        raise DomainError(f"unknown sample mode {mode!r}")
    points = ellipsoid.center + directions @ ellipsoid.cholesky.T
    return points[0] if size is None else points


def boundary_points(ellipsoid: Ellipsoid, count: int = 64) -> NDArray[np.float64]:
    """Return ``count`` evenly spaced boundary points of a 2-D ellipsoid."""
    if ellipsoid.dim != 2:
        raise DimensionError("boundary traces are only defined for 2-D ellipsoids")
    angles = np.linspace(0.0, 2.0 * np.pi, count, endpoint=False)
    circle = np.column_stack((np.cos(angles), np.sin(angles)))
    return ellipsoid.center + circle @ ellipsoid.cholesky.T


def interval_hull(ellipsoid: Ellipsoid) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
    """Return the tightest axis-aligned box (lower, upper) containing E."""
    radius = np.sqrt(np.diag(ellipsoid.shape))
    return ellipsoid.center - radius, ellipsoid.center + radius
