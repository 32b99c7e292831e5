"""ReLU feedforward NARX estimator: evaluation, training and weight files."""

from __future__ import annotations

import logging
import os
from collections.abc import Sequence
from dataclasses import dataclass, field
from typing import Any

import numpy as np
import pandas as pd
import voluptuous as vol
from numpy.typing import ArrayLike, NDArray

from .const import (
    HIDDEN_BIAS_INIT,
    LR_DECAY,
    LR_MIN_FRACTION,
    LR_PLATEAU_IMPROVEMENT,
    LR_PLATEAU_PATIENCE,
    SCALE_FLOOR,
)
from .exceptions import DimensionError, DomainError, TrainingDivergedError, WeightFileError
from .models import TrainingConfig
from .storage import read_frame, read_json, write_frame, write_json

_LOGGER = logging.getLogger(__name__)

WEIGHT_FILE_SCHEMA = vol.Schema(
    {
        vol.Required("arch"): vol.All([vol.All(int, vol.Range(min=1))], vol.Length(min=3)),
        vol.Required("weights"): [[[vol.Coerce(float)]]],
        vol.Required("biases"): [[vol.Coerce(float)]],
    },
    extra=vol.ALLOW_EXTRA,
)


@dataclass(frozen=True, eq=False)
class ReluNetwork:
    """Network z^{t+1} = relu(W^t z^t + b^t), output W^l z^l + b^l."""

    weights: tuple[NDArray[np.float64], ...]
    biases: tuple[NDArray[np.float64], ...]

    def __init__(self, weights: Sequence[ArrayLike], biases: Sequence[ArrayLike]) -> None:
        """Validate layer chaining and freeze the parameters."""
        ws = tuple(np.array(w, dtype=np.float64, ndmin=2) for w in weights)
        bs = tuple(np.array(b, dtype=np.float64).reshape(-1) for b in biases)
        if len(ws) < 2:
            raise DimensionError("network needs at least one hidden layer")
        if len(ws) != len(bs):
            raise DimensionError(f"{len(ws)} weight matrices but {len(bs)} bias vectors")
        for t, (w, b) in enumerate(zip(ws, bs, strict=True)):
            if b.size != w.shape[0]:
                raise DimensionError(
                    f"layer {t}: bias has {b.size} entries, W has {w.shape[0]} rows"
                )
            if t > 0 and w.shape[1] != ws[t - 1].shape[0]:
                raise DimensionError(
                    f"layer {t}: W has {w.shape[1]} columns, previous layer has "
                    f"{ws[t - 1].shape[0]} units"
                )
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise DomainError(f"layer {t}: parameters must be finite")
            w.setflags(write=False)
            b.setflags(write=False)
        object.__setattr__(self, "weights", ws)
        object.__setattr__(self, "biases", bs)

    @property
    def depth(self) -> int:
        """Return the number of hidden layers l."""
        return len(self.weights) - 1

    @property
    def arch(self) -> list[int]:
        """Return [N_0, N_1, ..., N_l, n_pi]."""
        return [int(self.weights[0].shape[1])] + [int(w.shape[0]) for w in self.weights]

    @property
    def input_dim(self) -> int:
        """Return N_0."""
        return int(self.weights[0].shape[1])

    @property
    def output_dim(self) -> int:
        """Return n_pi."""
        return int(self.weights[-1].shape[0])

    @property
    def hidden_widths(self) -> list[int]:
        """Return [N_1, ..., N_l]."""
        return [int(w.shape[0]) for w in self.weights[:-1]]

    def shifted(self, input_offset: ArrayLike, output_offset: ArrayLike) -> ReluNetwork:
        """Return g(x) = f(x + input_offset) - output_offset."""
        c = np.asarray(input_offset, dtype=np.float64).reshape(-1)
        o = np.asarray(output_offset, dtype=np.float64).reshape(-1)
        if c.size != self.input_dim or o.size != self.output_dim:
            raise DimensionError("offset dimensions do not match the network")
        biases = list(self.biases)
        biases[0] = biases[0] + self.weights[0] @ c
        biases[-1] = biases[-1] - o
        return ReluNetwork(self.weights, biases)

    def to_dict(self) -> dict[str, Any]:
        """Serialize to the weight-file JSON object."""
        return {
            "arch": self.arch,
            "weights": [w.tolist() for w in self.weights],
            "biases": [b.tolist() for b in self.biases],
        }

    @classmethod
    def from_dict(cls, data: Any) -> ReluNetwork:
        """Build from a weight-file JSON object, reporting the failing field path."""
        try:
            parsed = WEIGHT_FILE_SCHEMA(data)
        except vol.Invalid as err:
            path = ".".join(str(part) for part in err.path)
            raise WeightFileError(err.msg, field=path) from err

        arch = parsed["arch"]
        weights, biases = parsed["weights"], parsed["biases"]
        if len(weights) != len(arch) - 1:
            raise WeightFileError(f"expected {len(arch) - 1} layers, got {len(weights)}", "weights")
        if len(biases) != len(arch) - 1:
            raise WeightFileError(f"expected {len(arch) - 1} layers, got {len(biases)}", "biases")
        for t, (w, b) in enumerate(zip(weights, biases, strict=True)):
            rows, cols = arch[t + 1], arch[t]
            if len(w) != rows or any(len(row) != cols for row in w):
                raise WeightFileError(f"expected a {rows}x{cols} matrix", f"weights.{t}")
            if len(b) != rows:
                raise WeightFileError(f"expected {rows} entries", f"biases.{t}")
        try:
            return cls(weights, biases)
        except (DimensionError, DomainError) as err:
            raise WeightFileError(str(err), "weights") from err


@dataclass(frozen=True, eq=False)
class RegressorWindow:
    """Measurements y_k, y_{k-1}, ..., y_{k-N}, newest first."""

    entries: tuple[NDArray[np.float64], ...]

    def __post_init__(self) -> None:
        if not self.entries:
            raise DimensionError("window needs at least one measurement")
        dims = {entry.size for entry in self.entries}
        if len(dims) != 1:
            raise DimensionError(f"window entries have mixed dimensions {sorted(dims)}")

    @property
    def length(self) -> int:
        """Return N + 1."""
        return len(self.entries)

    @property
    def p(self) -> int:
        """Return the measurement dimension."""
        return int(self.entries[0].size)

    @property
    def stacked(self) -> NDArray[np.float64]:
        """Return vec[y_k, y_{k-1}, ..., y_{k-N}] of dimension p (N + 1)."""
        return np.concatenate(self.entries)

    @classmethod
    def from_sequence(cls, measurements: ArrayLike, k: int, window: int) -> RegressorWindow:
        """Take y_k back to y_{k-window} from a (T, p) measurement array."""
        ys = np.asarray(measurements, dtype=np.float64)
        if ys.ndim != 2:
            raise DimensionError("measurements must be a (T, p) array")
        if k < window or k >= ys.shape[0]:
            raise DimensionError(f"timestep {k} has no full window of length {window + 1}")
        return cls(tuple(ys[k - i].copy() for i in range(window + 1)))


@dataclass(frozen=True, eq=False)
class Dataset:
    """Stacked regressor windows and next-measurement labels."""

    inputs: NDArray[np.float64]
    labels: NDArray[np.float64]
    skipped: int = 0

    def __post_init__(self) -> None:
        if self.inputs.ndim != 2 or self.labels.ndim != 2:
            raise DimensionError("dataset inputs and labels must be 2-D")
        if self.inputs.shape[0] != self.labels.shape[0]:
            raise DimensionError(
                f"{self.inputs.shape[0]} inputs but {self.labels.shape[0]} labels"
            )

    def __len__(self) -> int:
        return int(self.inputs.shape[0])


@dataclass(frozen=True, eq=False)
class TrainingResult:
    """Trained network, its final metrics and the per-epoch loss on standardized data."""

    network: ReluNetwork
    train_mse: float
    val_mse: float
    history: list[float] = field(default_factory=list)

    def metrics(self) -> dict[str, Any]:
        """Return the metrics as a JSON-ready dictionary."""
        return {
            "train_mse": self.train_mse,
            "val_mse": self.val_mse,
            "val_rmse": float(np.sqrt(self.val_mse)),
            "epochs": len(self.history),
            "final_epoch_loss": self.history[-1] if self.history else None,
        }


def forward(net: ReluNetwork, inputs: ArrayLike) -> NDArray[np.float64]:
    """Evaluate the network on one input vector or a (n, N_0) batch."""
    x = np.asarray(inputs, dtype=np.float64)
    single = x.ndim == 1
    batch = np.atleast_2d(x)
    if batch.shape[1] != net.input_dim:
        raise DimensionError(f"input has dimension {batch.shape[1]}, expected {net.input_dim}")
    z = batch
    for w, b in zip(net.weights[:-1], net.biases[:-1], strict=True):
        z = np.maximum(z @ w.T + b, 0.0)
    out = z @ net.weights[-1].T + net.biases[-1]
    return out[0] if single else out


def build_dataset(trajectories: Sequence[ArrayLike], window: int) -> Dataset:
    """Pair every full window y_k..y_{k-N} with y_{k+1}, never crossing trajectories."""
    if window < 0:
        raise DomainError(f"window length must be nonnegative, got {window}")
    inputs: list[NDArray[np.float64]] = []
    labels: list[NDArray[np.float64]] = []
    skipped = 0
    p: int | None = None
    for trajectory in trajectories:
        ys = np.asarray(trajectory, dtype=np.float64)
        if ys.ndim == 1:
            ys = ys[:, None]
        if p is None:
            p = ys.shape[1]
        elif ys.shape[1] != p:
            raise DimensionError(f"trajectory measurement dimension {ys.shape[1]} != {p}")
        if ys.shape[0] < window + 2:
            skipped += 1
            continue
        for k in range(window, ys.shape[0] - 1):
            inputs.append(ys[k - window : k + 1][::-1].reshape(-1))
            labels.append(ys[k + 1])
    if skipped:
        _LOGGER.warning("Skipped %d trajectories shorter than %d samples", skipped, window + 2)
    width = (p or 0) * (window + 1)
    if not inputs:
        return Dataset(np.empty((0, width)), np.empty((0, p or 0)), skipped=skipped)
    return Dataset(inputs=np.array(inputs), labels=np.array(labels), skipped=skipped)


def loss_and_gradients(
    net: ReluNetwork, inputs: ArrayLike, labels: ArrayLike
) -> tuple[float, list[NDArray[np.float64]], list[NDArray[np.float64]]]:
    """Return the mean squared error and its analytic gradients w.r.t. every W^t and b^t."""
    x = np.atleast_2d(np.asarray(inputs, dtype=np.float64))
    y = np.atleast_2d(np.asarray(labels, dtype=np.float64))
    activations = [x]
    pre_activations = []
    for w, b in zip(net.weights[:-1], net.biases[:-1], strict=True):
        s = activations[-1] @ w.T + b
        pre_activations.append(s)
        activations.append(np.maximum(s, 0.0))
    error = activations[-1] @ net.weights[-1].T + net.biases[-1] - y
    loss = float(np.mean(error**2))

    delta = 2.0 * error / error.size
    grads_w: list[NDArray[np.float64]] = [np.empty(0)] * len(net.weights)
    grads_b: list[NDArray[np.float64]] = [np.empty(0)] * len(net.weights)
    for t in range(len(net.weights) - 1, -1, -1):
        grads_w[t] = delta.T @ activations[t]
        grads_b[t] = delta.sum(axis=0)
        if t > 0:
            delta = (delta @ net.weights[t]) * (pre_activations[t - 1] > 0.0)
    return loss, grads_w, grads_b


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> NDArray[np.float64]:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_out, fan_in))


def _standardization(
    values: NDArray[np.float64],
) -> tuple[NDArray[np.float64], NDArray[np.float64], NDArray[np.bool_]]:
    """Return per-column mean, scale and constant flags; constant columns keep scale 1."""
    mean = values.mean(axis=0)
    scale = values.std(axis=0)
    constant = scale <= SCALE_FLOOR * np.maximum(np.abs(mean), 1.0)
    return mean, np.where(constant, 1.0, scale), constant


def _fold_standardization(
    weights: Sequence[NDArray[np.float64]],
    biases: Sequence[NDArray[np.float64]],
    x_stats: tuple[NDArray[np.float64], NDArray[np.float64], NDArray[np.bool_]],
    y_stats: tuple[NDArray[np.float64], NDArray[np.float64], NDArray[np.bool_]],
) -> ReluNetwork:
    """Absorb the input and label scaling into the first and last layer.

    A label column that is constant on the training split is predicted by its
    mean through the output bias alone.
    """
    x_mean, x_scale, _ = x_stats
    y_mean, y_scale, y_constant = y_stats
    ws, bs = list(weights), list(biases)
    ws[0] = weights[0] / x_scale
    bs[0] = biases[0] - ws[0] @ x_mean
    ws[-1] = np.where(y_constant[:, None], 0.0, y_scale[:, None] * weights[-1])
    bs[-1] = np.where(y_constant, y_mean, y_scale * biases[-1] + y_mean)
    return ReluNetwork(ws, bs)


def fit(dataset: Dataset, arch: Sequence[int], cfg: TrainingConfig) -> TrainingResult:
    """Train by mini-batch SGD with momentum on the mean squared prediction error.

    Inputs and labels are standardized with training-split statistics while
    training, and the scaling is folded back into W^0, b^0, W^l and b^l, so the
    returned network maps raw measurements to raw measurements. The learning
    rate halves whenever the epoch loss stalls for a few epochs.

    The run is a pure function of (dataset, arch, cfg): initialization, the
    train/validation split and every epoch shuffle draw from one generator
    seeded with ``cfg.seed``.
    """
    if len(dataset) == 0:
        raise DomainError("cannot train on an empty dataset")
    widths = [int(n) for n in arch]
    if len(widths) < 3:
        raise DimensionError("architecture needs input, at least one hidden and an output width")
    if widths[0] != dataset.inputs.shape[1] or widths[-1] != dataset.labels.shape[1]:
        raise DimensionError(
            f"architecture {widths} does not match dataset "
            f"({dataset.inputs.shape[1]} -> {dataset.labels.shape[1]})"
        )

    rng = np.random.default_rng(cfg.seed)
    weights = [_glorot(rng, widths[t], widths[t + 1]) for t in range(len(widths) - 1)]
    biases = [np.full(widths[t + 1], HIDDEN_BIAS_INIT) for t in range(len(widths) - 2)]
    biases.append(np.zeros(widths[-1]))

    order = rng.permutation(len(dataset))
    n_val = 0
    if len(dataset) >= 2:
        n_val = min(max(int(round(cfg.validation_split * len(dataset))), 1), len(dataset) - 1)
    val_idx, train_idx = order[:n_val], order[n_val:]
    x_raw, y_raw = dataset.inputs[train_idx], dataset.labels[train_idx]
    x_stats, y_stats = _standardization(x_raw), _standardization(y_raw)
    x_train = (x_raw - x_stats[0]) / x_stats[1]
    y_train = (y_raw - y_stats[0]) / y_stats[1]

    vel_w = [np.zeros_like(w) for w in weights]
    vel_b = [np.zeros_like(b) for b in biases]
    lr = cfg.learning_rate
    best = np.inf
    stale = 0
    history: list[float] = []
    for epoch in range(cfg.epochs):
        perm = rng.permutation(len(train_idx))
        total = 0.0
        for start in range(0, len(perm), cfg.batch_size):
            batch = perm[start : start + cfg.batch_size]
            net = ReluNetwork(weights, biases)
            loss, gw, gb = loss_and_gradients(net, x_train[batch], y_train[batch])
            if not np.isfinite(loss):
                raise TrainingDivergedError(
                    f"training loss became non-finite at epoch {epoch}; "
                    f"try a learning rate below {cfg.learning_rate:g}"
                )
            total += loss * len(batch)
            for t in range(len(weights)):
                vel_w[t] = cfg.momentum * vel_w[t] - lr * gw[t]
                vel_b[t] = cfg.momentum * vel_b[t] - lr * gb[t]
                weights[t] = weights[t] + vel_w[t]
                biases[t] = biases[t] + vel_b[t]
            if not all(np.all(np.isfinite(p)) for p in (*weights, *biases)):
                raise TrainingDivergedError(
                    f"parameters became non-finite at epoch {epoch}; "
                    f"try a learning rate below {cfg.learning_rate:g}"
                )
        epoch_loss = total / len(perm)
        if not np.isfinite(epoch_loss):
            raise TrainingDivergedError(
                f"training diverged at epoch {epoch}; try a learning rate below "
                f"{cfg.learning_rate:g}"
            )
        history.append(epoch_loss)
        if epoch % 50 == 0:
            _LOGGER.debug("Epoch %d: loss %.6e (lr %.3e)", epoch, epoch_loss, lr)

        if epoch_loss < best * (1.0 - LR_PLATEAU_IMPROVEMENT):
            best, stale = epoch_loss, 0
            continue
        stale += 1
        floor = cfg.learning_rate * LR_MIN_FRACTION
        if stale >= LR_PLATEAU_PATIENCE and lr > floor:
            lr = max(lr * LR_DECAY, floor)
            stale = 0
            _LOGGER.debug("Loss plateaued at epoch %d; learning rate now %.3e", epoch, lr)

    network = _fold_standardization(weights, biases, x_stats, y_stats)
    train_mse = _mse(network, x_raw, y_raw)
    if n_val:
        val_mse = _mse(network, dataset.inputs[val_idx], dataset.labels[val_idx])
    else:
        val_mse = train_mse
    _LOGGER.info(
        "Trained %s on %d samples: train MSE %.4e, validation MSE %.4e",
        widths,
        len(train_idx),
        train_mse,
        val_mse,
    )
    return TrainingResult(network=network, train_mse=train_mse, val_mse=val_mse, history=history)


def train(dataset: Dataset, arch: Sequence[int], cfg: TrainingConfig) -> ReluNetwork:
    """Train and return only the network."""
    return fit(dataset, arch, cfg).network


def _mse(net: ReluNetwork, inputs: NDArray[np.float64], labels: NDArray[np.float64]) -> float:
    return float(np.mean((forward(net, inputs) - labels) ** 2))


def save_weights(net: ReluNetwork, path: str | os.PathLike[str]) -> None:
    """Write the weight file atomically; floats round-trip bit-exactly."""
    write_json(path, net.to_dict())


def load_weights(path: str | os.PathLike[str]) -> ReluNetwork:
    """Read and validate a weight file."""
    try:
        data = read_json(path)
    except ValueError as err:
        raise WeightFileError(f"not valid JSON: {err}") from err
    return ReluNetwork.from_dict(data)


def save_dataset_csv(dataset: Dataset, path: str | os.PathLike[str]) -> None:
    """Write one stacked window plus label per row."""
    frame = pd.concat(
        [
            pd.DataFrame(dataset.inputs, columns=[f"x{i}" for i in range(dataset.inputs.shape[1])]),
            pd.DataFrame(dataset.labels, columns=[f"y{i}" for i in range(dataset.labels.shape[1])]),
        ],
        axis=1,
    )
    write_frame(path, frame)


def load_dataset_csv(path: str | os.PathLike[str]) -> Dataset:
    """Read a dataset written by :func:`save_dataset_csv`."""
    frame = read_frame(path)
    x_cols = [c for c in frame.columns if c.startswith("x")]
    y_cols = [c for c in frame.columns if c.startswith("y")]
    if not x_cols or not y_cols or len(x_cols) + len(y_cols) != len(frame.columns):
        raise WeightFileError("dataset columns must be x0..xn followed by y0..ym", "columns")
    return Dataset(
        inputs=frame[x_cols].to_numpy(dtype=np.float64),
        labels=frame[y_cols].to_numpy(dtype=np.float64),
    )
