"""Plant simulators with Gaussian sensor noise and fault injection."""

from __future__ import annotations

import logging
import math

import numpy as np
import pandas as pd
from numpy.typing import ArrayLike, NDArray

from .const import (
    BEAM_INIT_HIGH,
    BEAM_INIT_LOW,
    FAULT_DRAIN_BLOCKAGE,
    FAULT_SENSOR_BIAS,
    FAULT_VIBRATION,
    SYSTEM_BEAM,
    SYSTEM_TANKS,
    TANK_INIT_HIGH,
    TANK_INIT_LOW,
)
from .ellipsoid import Ellipsoid
from .exceptions import DimensionError, DomainError, NumericalError
from .models import BeamSliderParams, FaultSpec, Trajectory, TwoTankParams

_LOGGER = logging.getLogger(__name__)


def _noise(
    sigma_v: tuple[tuple[float, ...], ...], steps: int, rng: np.random.Generator
) -> NDArray[np.float64]:
    """Draw i.i.d. N(0, Sigma_v) rows."""
    chol = Ellipsoid(np.zeros(len(sigma_v)), sigma_v).cholesky
    return rng.standard_normal((steps, chol.shape[0])) @ chol.T


def _initial(x0: ArrayLike, dim: int) -> NDArray[np.float64]:
    x = np.asarray(x0, dtype=np.float64).reshape(-1)
    if x.size != dim:
        raise DimensionError(f"initial state has dimension {x.size}, expected {dim}")
    return x


def simulate_beam(
    params: BeamSliderParams,
    x0: ArrayLike,
    steps: int,
    rng: np.random.Generator,
    fault: FaultSpec | None = None,
    seed: int | None = None,
) -> Trajectory:
    """Iterate x_{k+1} = 0.8 R(beta) x_k and measure y_k = x_k + v_k.

    A vibration fault adds [d; d] sin(k) to what the sensor sees; with
    ``params.vibration_recursive`` it is added to the state and propagates.
    A sensor-bias fault adds [d; d] to the measurement.
    """
    if steps < 1:
        raise DomainError(f"steps must be positive, got {steps}")
    fault = fault or FaultSpec()
    transition = params.transition
    x = _initial(x0, 2)

    states = np.empty((steps, 2))
    ideal = np.empty((steps, 2))
    for k in range(steps):
        offset = np.zeros(2)
        if fault.active(FAULT_VIBRATION, k):
            shake = np.full(2, fault.magnitude * math.sin(k))
            if params.vibration_recursive:
                x = x + shake
            else:
                offset += shake
        if fault.active(FAULT_SENSOR_BIAS, k):
            offset += fault.magnitude
        states[k] = x
        ideal[k] = x + offset
        x = transition @ x

    noise = _noise(params.sigma_v, steps, rng)
    return Trajectory(states, ideal, ideal + noise, noise, seed, fault)


def _tank_rates(
    h: NDArray[np.float64], params: TwoTankParams, blockage: float
) -> NDArray[np.float64]:
    outflow = params.discharge * params.drain_area
    h1, h2 = np.maximum(h, 0.0)
    q12 = outflow * math.sqrt(2.0 * params.g * h1)
    q2 = outflow * (1.0 - blockage) * math.sqrt(2.0 * params.g * h2)
    return np.array([params.q_in - q12, q12 - q2])


def simulate_tanks(
    params: TwoTankParams,
    h0: ArrayLike,
    steps: int,
    rng: np.random.Generator,
    fault: FaultSpec | None = None,
    seed: int | None = None,
) -> Trajectory:
    """Integrate the two-tank cascade with RK4 and sample the levels every dt.

    A drain-blockage fault scales the lower drain area by (1 - fraction).
    """
    if steps < 1:
        raise DomainError(f"steps must be positive, got {steps}")
    fault = fault or FaultSpec()
    h = _initial(h0, 2)
    if np.any(h < 0.0):
        raise DomainError("initial tank levels must be nonnegative")
    sub = params.dt / params.substeps

    states = np.empty((steps, 2))
    for k in range(steps):
        states[k] = h
        blockage = fault.magnitude if fault.active(FAULT_DRAIN_BLOCKAGE, k) else 0.0
        for _ in range(params.substeps):
            k1 = _tank_rates(h, params, blockage)
            k2 = _tank_rates(h + 0.5 * sub * k1, params, blockage)
            k3 = _tank_rates(h + 0.5 * sub * k2, params, blockage)
            k4 = _tank_rates(h + sub * k3, params, blockage)
            h = np.maximum(h + sub / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4), 0.0)
        if not np.all(np.isfinite(h)):
            raise NumericalError(f"tank levels became non-finite at step {k + 1}")

    noise = _noise(params.sigma_v, steps, rng)
    ideal = states.copy()
    return Trajectory(states, ideal, ideal + noise, noise, seed, fault)


def generate_training_set(
    system: str,
    params: BeamSliderParams | TwoTankParams,
    n_trajectories: int,
    steps: int,
    rng: np.random.Generator,
) -> list[Trajectory]:
    """Simulate fault-free runs from random initial conditions, one child RNG per run.

    Beam initial states are uniform on [-2, 2]^2, tank levels uniform on [5, 25]^2.
    """
    if n_trajectories < 1 or steps < 1:
        raise DomainError("trajectory count and length must be positive")
    trajectories = []
    for index, child in enumerate(rng.spawn(n_trajectories)):
        if system == SYSTEM_BEAM and isinstance(params, BeamSliderParams):
            x0 = child.uniform(BEAM_INIT_LOW, BEAM_INIT_HIGH, size=2)
            trajectories.append(simulate_beam(params, x0, steps, child, seed=index))
        elif system == SYSTEM_TANKS and isinstance(params, TwoTankParams):
            h0 = child.uniform(TANK_INIT_LOW, TANK_INIT_HIGH, size=2)
            trajectories.append(simulate_tanks(params, h0, steps, child, seed=index))
        else:
            raise DomainError(f"parameters {type(params).__name__} do not fit system {system!r}")
    _LOGGER.info("Simulated %d %s trajectories of %d steps", n_trajectories, system, steps)
    return trajectories


def measurement_sequences(
    trajectories: list[Trajectory], ideal: bool = False
) -> list[NDArray[np.float64]]:
    """Return the noisy (default) or noise-free measurement arrays."""
    return [t.ideal if ideal else t.measurements for t in trajectories]


def trajectory_to_frame(trajectory: Trajectory, state_label: str = "x") -> pd.DataFrame:
    """Return columns k, state, ideal measurement, measurement and noise."""
    frame = pd.DataFrame({"k": np.arange(len(trajectory))})
    for prefix, values in (
        (state_label, trajectory.states),
        ("ystar", trajectory.ideal),
        ("y", trajectory.measurements),
        ("v", trajectory.noise),
    ):
        for j in range(values.shape[1]):
            frame[f"{prefix}{j}"] = values[:, j]
    return frame


def frame_measurements(frame: pd.DataFrame, ideal: bool = False) -> NDArray[np.float64]:
    """Extract the (T, p) measurement array from an exported trajectory frame."""
    prefix = "ystar" if ideal else "y"
    columns = [c for c in frame.columns if c[len(prefix) :].isdigit() and c.startswith(prefix)]
    if not columns:
        raise DimensionError(f"trajectory frame has no {prefix}<j> columns")
    columns.sort(key=lambda c: int(c[len(prefix) :]))
    return frame[columns].to_numpy(dtype=np.float64)
