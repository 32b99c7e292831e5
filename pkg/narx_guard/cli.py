"""Command-line harness: simulate, train, detect, compare and report."""

from __future__ import annotations

import argparse
import logging
import os
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Any

import numpy as np
import pandas as pd

from .backend import ConicBackend, get_backend
from .certifier import (
    affine_form,
    certify,
    certify_single,
    dump_lmi_triplets,
    pose_problem,
    resolve_objective,
)
from .config import ExperimentConfig, Scenario, resolve_config
from .const import (
    ALARM_DIR,
    DATASET_FILE,
    DEFAULT_RUN_ROOT,
    ELLIPSE_TRACE_POINTS,
    EXIT_CONFIG,
    EXIT_OK,
    EXIT_RUNTIME,
    EXIT_WARNING,
    FAULT_NONE,
    IDEAL_DATASET_FILE,
    IDEAL_WEIGHTS_FILE,
    INDETERMINATE_WARN_FRACTION,
    INPUT_QC_FILE,
    LMI_DIR,
    MANIFEST_FILE,
    METRICS_FILE,
    OBJECTIVE_LOGDET,
    REPORT_FILE,
    STATUS_NUMERICAL,
    SUMMARY_FILE,
    SYSTEM_BEAM,
    TRAINING_FILE,
    TRAINING_NOISE_ELLIPSES_FILE,
    TRAINING_NOISE_FILE,
    TRAJECTORY_DIR,
    WEIGHTS_FILE,
)
from .detector import DetectorConfig, false_alarm_bound, rates_from_frame, run
from .ellipsoid import ConfidenceSpec, Ellipsoid, boundary_points, confidence_ellipsoid
from .exceptions import (
    BackendUnavailableError,
    ConfigError,
    IntegrityError,
    NarxGuardError,
    NumericalError,
    SolverError,
)
from .models import Trajectory
from .plant import (
    frame_measurements,
    generate_training_set,
    simulate_beam,
    simulate_tanks,
    trajectory_to_frame,
)
from .qc import qc_bundle
from .relu_net import (
    RegressorWindow,
    ReluNetwork,
    build_dataset,
    fit,
    load_weights,
    save_dataset_csv,
    save_weights,
)
from .storage import (
    atomic_write_text,
    read_frame,
    read_json,
    sha256_file,
    write_frame,
    write_json,
)

_LOGGER = logging.getLogger(__name__)


@dataclass
class RunContext:
    """Resolved config, run directory and the manifest being updated."""

    cfg: ExperimentConfig
    run_dir: Path
    backend_name: str | None = None
    _backend: ConicBackend | None = field(default=None, repr=False)

    @property
    def backend(self) -> ConicBackend:
        """Return the solver backend, created on first use."""
        if self._backend is None:
            self._backend = get_backend(self.backend_name)
        return self._backend

    def path(self, *parts: str) -> Path:
        """Return a path inside the run directory."""
        return self.run_dir.joinpath(*parts)

    def record(self, command: str, *paths: Path) -> None:
        """Add the checksums of freshly written files to the manifest."""
        manifest_path = self.path(MANIFEST_FILE)
        manifest: dict[str, Any] = {"files": {}}
        if manifest_path.exists():
            manifest = read_json(manifest_path)
        manifest["config"] = self.cfg.name
        manifest["config_hash"] = self.cfg.config_hash
        for path in paths:
            rel = path.relative_to(self.run_dir).as_posix()
            manifest["files"][rel] = {"command": command, "sha256": sha256_file(path)}
        write_json(manifest_path, manifest)


@dataclass(frozen=True)
class ExperimentReport:
    """Consolidated results of one run directory."""

    scenarios: dict[str, Any]
    training: dict[str, Any]
    input_qcs: dict[str, Any] | None
    training_noise: dict[str, Any] | None
    provenance: dict[str, Any]

    def to_dict(self) -> dict[str, Any]:
        """Return the JSON document."""
        return {
            "scenarios": self.scenarios,
            "training": self.training,
            "input_qcs": self.input_qcs,
            "training_noise": self.training_noise,
            "provenance": self.provenance,
        }

    def summary_text(self) -> str:
        """Return a human-readable summary."""
        lines = [f"Experiment {self.provenance['config']} ({self.provenance['config_hash'][:12]})"]
        for name, entry in sorted(self.scenarios.items()):
            line = (
                f"  {name}: alarm rate {entry['alarm_rate']:.4f} over {entry['evaluated']} steps "
                f"(bound {entry['false_alarm_bound']:.4f}, {entry['indeterminate']} indeterminate)"
            )
            if entry.get("reference_rate") is not None:
                line += f", reference {entry['reference_rate']:.4f}"
            lines.append(line)
        if self.input_qcs:
            lines.append(
                f"  input QCs: {self.input_qcs['dominated']}/{self.input_qcs['solved']} steps "
                "with multi-ellipsoid volume <= single-ellipsoid volume"
            )
        if self.training_noise:
            lines.append(
                f"  training noise: noisy-trained bound no larger on "
                f"{self.training_noise['noisy_smaller_fraction']:.2%} of steps"
            )
        return "\n".join(lines) + "\n"


def _context(args: argparse.Namespace) -> RunContext:
    cfg = resolve_config(args.config)
    root = args.output or cfg.output_dir or os.path.join(DEFAULT_RUN_ROOT, cfg.name)
    run_dir = Path(root)
    run_dir.mkdir(parents=True, exist_ok=True)
    return RunContext(cfg=cfg, run_dir=run_dir, backend_name=args.backend)


def _simulate(cfg: ExperimentConfig, scenario: Scenario, steps: int) -> Trajectory:
    # Every scenario replays the same noise sequence.
    rng = np.random.default_rng(cfg.detection_seed)
    simulate = simulate_beam if cfg.system == SYSTEM_BEAM else simulate_tanks
    return simulate(
        cfg.plant,  # type: ignore[arg-type]
        cfg.initial_state,
        steps,
        rng,
        fault=scenario.fault,
        seed=cfg.detection_seed,
    )


def _state_label(cfg: ExperimentConfig) -> str:
    return "x" if cfg.system == SYSTEM_BEAM else "h"


def cmd_simulate(ctx: RunContext, args: argparse.Namespace) -> int:
    """Write the training trajectories and one detection trajectory per scenario."""
    cfg = ctx.cfg
    training = generate_training_set(
        cfg.system,
        cfg.plant,
        cfg.n_trajectories,
        cfg.train_steps,
        np.random.default_rng(cfg.training.seed),
    )
    frames = []
    for index, trajectory in enumerate(training):
        frame = trajectory_to_frame(trajectory, _state_label(cfg))
        frame.insert(0, "trajectory", index)
        frames.append(frame)
    written = [write_frame(ctx.path(TRAINING_FILE), pd.concat(frames, ignore_index=True))]

    for scenario in cfg.scenarios:
        trajectory = _simulate(cfg, scenario, cfg.detection_steps)
        path = ctx.path(TRAJECTORY_DIR, f"{scenario.name}.csv")
        written.append(write_frame(path, trajectory_to_frame(trajectory, _state_label(cfg))))
    ctx.record("simulate", *written)
    _LOGGER.info("Wrote %d trajectory files to %s", len(written), ctx.run_dir)
    return EXIT_OK


def _training_sequences(ctx: RunContext, ideal: bool) -> list[np.ndarray]:
    path = ctx.path(TRAINING_FILE)
    if not path.exists():
        cmd_simulate(ctx, argparse.Namespace())
    frame = read_frame(path)
    return [
        frame_measurements(group, ideal=ideal)
        for _, group in frame.groupby("trajectory", sort=True)
    ]


def _train(ctx: RunContext, ideal: bool) -> ReluNetwork:
    cfg = ctx.cfg
    dataset = build_dataset(_training_sequences(ctx, ideal), cfg.window)
    result = fit(dataset, cfg.arch, cfg.training)
    tag = "ideal" if ideal else "noisy"

    weights_path = ctx.path(IDEAL_WEIGHTS_FILE if ideal else WEIGHTS_FILE)
    dataset_path = ctx.path(IDEAL_DATASET_FILE if ideal else DATASET_FILE)
    metrics_path = ctx.path(METRICS_FILE)
    save_weights(result.network, weights_path)
    save_dataset_csv(dataset, dataset_path)
    metrics = read_json(metrics_path) if metrics_path.exists() else {}
    metrics[tag] = {**result.metrics(), "arch": cfg.arch, "samples": len(dataset)}
    write_json(metrics_path, metrics)
    ctx.record("train", weights_path, dataset_path, metrics_path)
    return result.network


def cmd_train(ctx: RunContext, args: argparse.Namespace) -> int:
    """Train the estimator on noisy (default) or noise-free measurements."""
    _train(ctx, ideal=args.ideal_data)
    return EXIT_OK


def _weights(ctx: RunContext, path: str | None, ideal: bool = False) -> ReluNetwork:
    if path:
        return load_weights(path)
    default = ctx.path(IDEAL_WEIGHTS_FILE if ideal else WEIGHTS_FILE)
    if default.exists():
        return load_weights(default)
    return _train(ctx, ideal)


def _measurements(ctx: RunContext, scenario: Scenario, path: str | None) -> np.ndarray:
    source = Path(path) if path else ctx.path(TRAJECTORY_DIR, f"{scenario.name}.csv")
    if not source.exists():
        if path:
            raise ConfigError(f"trajectory file {source} does not exist")
        cmd_simulate(ctx, argparse.Namespace())
    return frame_measurements(read_frame(source))


def _detector(ctx: RunContext, network: ReluNetwork) -> DetectorConfig:
    cfg = ctx.cfg
    return DetectorConfig.create(
        network,
        cfg.window,
        cfg.p_bar,
        cfg.sigma_v,
        objective=cfg.objective,
        use_interval_bounds=cfg.use_interval_bounds,
        workers=cfg.workers,
    )


def _scenarios(ctx: RunContext, name: str | None) -> list[Scenario]:
    return [ctx.cfg.scenario(name)] if name else list(ctx.cfg.scenarios)


def cmd_detect(ctx: RunContext, args: argparse.Namespace) -> int:
    """Run the detector over each selected scenario trajectory."""
    detector = _detector(ctx, _weights(ctx, args.weights))
    status = EXIT_OK
    for scenario in _scenarios(ctx, args.scenario):
        log = run(detector, _measurements(ctx, scenario, args.trajectory), ctx.backend)
        onset = scenario.fault.onset if scenario.fault.kind != FAULT_NONE else None
        summary = {
            **log.summary_dict(onset),
            "scenario": scenario.name,
            "fault": {
                "kind": scenario.fault.kind,
                "magnitude": scenario.fault.magnitude,
                "onset": scenario.fault.onset,
            },
            "reference_rate": scenario.reference_rate,
        }
        csv_path = ctx.path(ALARM_DIR, f"{scenario.name}.csv")
        json_path = ctx.path(ALARM_DIR, f"{scenario.name}.json")
        write_frame(csv_path, log.to_frame())
        write_json(json_path, summary)
        ctx.record("detect", csv_path, json_path)
        _LOGGER.info(
            "Scenario %s: alarm rate %.4f (bound %.4f, reference %s)",
            scenario.name,
            log.alarm_rate,
            log.false_alarm_bound,
            scenario.reference_rate,
        )
        if log.indeterminate_fraction > INDETERMINATE_WARN_FRACTION:
            _LOGGER.warning(
                "Scenario %s: %.1f%% of steps are indeterminate",
                scenario.name,
                100.0 * log.indeterminate_fraction,
            )
            status = EXIT_WARNING
    return status


def _normal_scenario(ctx: RunContext) -> Scenario:
    for scenario in ctx.cfg.scenarios:
        if scenario.fault.kind == FAULT_NONE:
            return scenario
    return ctx.cfg.scenarios[0]


def _compare_windows(
    ctx: RunContext, args: argparse.Namespace
) -> list[tuple[int, RegressorWindow]]:
    cfg = ctx.cfg
    scenario = ctx.cfg.scenario(args.scenario) if args.scenario else _normal_scenario(ctx)
    ys = _measurements(ctx, scenario, args.trajectory)
    count = args.steps or cfg.compare_steps
    last = min(cfg.window + count, ys.shape[0])
    return [
        (k, RegressorWindow.from_sequence(ys, k, cfg.window)) for k in range(cfg.window, last)
    ]


def _input_ellipsoids(confidence: ConfidenceSpec, window: RegressorWindow) -> list[Ellipsoid]:
    return [confidence_ellipsoid(confidence, entry) for entry in window.entries]


def _dump_lmi(
    ctx: RunContext, k: int, network: ReluNetwork, inputs: list[Ellipsoid], objective: str
) -> list[Path]:
    """Write the QC matrices and the affine LMI of step k for external cross-checks."""
    paths: list[Path] = []
    for tag, single in (("multi", False), ("single", True)):
        problem, _ = pose_problem(network, inputs, single=single, objective=objective)
        stem = ctx.path(LMI_DIR, f"step_{k}_{tag}")
        bundle = qc_bundle(problem.stacked, problem.input_matrices)
        paths.append(write_json(stem.with_suffix(".json"), bundle))
        paths.append(dump_lmi_triplets(affine_form(problem), stem.with_suffix(".txt")))
    return paths


def cmd_compare_input_qcs(ctx: RunContext, args: argparse.Namespace) -> int:
    """Tabulate multi- vs single-ellipsoid certified log-volumes."""
    cfg = ctx.cfg
    network = _weights(ctx, args.weights)
    confidence = ConfidenceSpec.build(cfg.sigma_v, cfg.p_bar)
    objective = resolve_objective(cfg.objective, ctx.backend)
    if objective != OBJECTIVE_LOGDET:
        _LOGGER.warning(
            "Objective %s does not order bounds by volume; per-block dominance may fail",
            objective,
        )
    rows = []
    dumped: list[Path] = []
    for k, window in _compare_windows(ctx, args):
        inputs = _input_ellipsoids(confidence, window)
        if args.dump_lmi:
            dumped.extend(_dump_lmi(ctx, k, network, inputs, objective))
        row: dict[str, Any] = {"k": k}
        try:
            multi = certify(network, inputs, objective, ctx.backend)
            single = certify_single(network, inputs, objective, ctx.backend)
        except (SolverError, NumericalError) as err:
            _LOGGER.warning("Step %d skipped: %s", k, err)
            status = err.status if isinstance(err, SolverError) else STATUS_NUMERICAL
            row.update(multi=np.nan, single=np.nan, difference=np.nan, status=status)
        else:
            row.update(
                multi=multi.log_volume,
                single=single.log_volume,
                difference=multi.log_volume - single.log_volume,
                status="solved",
            )
        rows.append(row)

    frame = pd.DataFrame(rows, columns=["k", "multi", "single", "difference", "status"])
    path = write_frame(ctx.path(INPUT_QC_FILE), frame)
    ctx.record("compare-input-qcs", path, *dumped)
    solved = frame[frame["status"] == "solved"]
    dominated = int((solved["difference"] <= 1e-6).sum())
    _LOGGER.info("Per-block QC dominance held on %d of %d solved steps", dominated, len(solved))
    return EXIT_OK


def cmd_compare_training_noise(ctx: RunContext, args: argparse.Namespace) -> int:
    """Certify noisy- and ideal-trained twins at identical conditions."""
    cfg = ctx.cfg
    networks = {"noisy": _weights(ctx, None), "ideal": _weights(ctx, None, ideal=True)}
    confidence = ConfidenceSpec.build(cfg.sigma_v, cfg.p_bar)
    volumes = []
    traces = []
    for k, window in _compare_windows(ctx, args):
        inputs = _input_ellipsoids(confidence, window)
        row: dict[str, Any] = {"k": k}
        for tag, network in networks.items():
            try:
                bound = certify(network, inputs, cfg.objective, ctx.backend)
            except (SolverError, NumericalError) as err:
                _LOGGER.warning("Step %d (%s) skipped: %s", k, tag, err)
                row[tag] = np.nan
                continue
            row[tag] = bound.log_volume
            if bound.ellipsoid.dim == 2:
                points = boundary_points(bound.ellipsoid, ELLIPSE_TRACE_POINTS)
                for index, (e0, e1) in enumerate(points):
                    traces.append({"k": k, "model": tag, "point": index, "e0": e0, "e1": e1})
        volumes.append(row)

    frame = pd.DataFrame(volumes, columns=["k", "noisy", "ideal"])
    paired = frame.dropna()
    fraction = float((paired["noisy"] <= paired["ideal"]).mean()) if len(paired) else 0.0
    volume_path = write_frame(ctx.path(TRAINING_NOISE_FILE), frame)
    trace_path = write_frame(
        ctx.path(TRAINING_NOISE_ELLIPSES_FILE),
        pd.DataFrame(traces, columns=["k", "model", "point", "e0", "e1"]),
    )
    ctx.record("compare-training-noise", volume_path, trace_path)
    _LOGGER.info("Noisy-trained bound no larger on %.1f%% of %d steps", 100 * fraction, len(paired))
    return EXIT_OK


def _verify_manifest(ctx: RunContext) -> dict[str, Any]:
    manifest_path = ctx.path(MANIFEST_FILE)
    if not manifest_path.exists():
        raise IntegrityError(f"{manifest_path} is missing")
    manifest = read_json(manifest_path)
    missing = []
    for rel, entry in sorted(manifest["files"].items()):
        path = ctx.path(rel)
        if not path.exists():
            missing.append(rel)
        elif sha256_file(path) != entry["sha256"]:
            raise IntegrityError(f"{rel} does not match its recorded checksum")
    if missing:
        raise IntegrityError(f"files listed in the manifest are missing: {', '.join(missing)}")
    return manifest


def _scenario_report(ctx: RunContext, summary_path: Path) -> dict[str, Any]:
    summary = read_json(summary_path)
    csv_path = summary_path.with_suffix(".csv")
    if not csv_path.exists():
        raise IntegrityError(f"alarm log {csv_path.name} is missing")
    onset = summary.get("onset")
    frame = read_frame(csv_path)
    overall, late = rates_from_frame(frame, onset)
    if overall != Fraction(summary["alarm_rate_exact"]):
        raise IntegrityError(f"{csv_path.name}: recomputed rate {overall} differs from summary")
    if onset is not None and late != Fraction(summary["post_onset_rate_exact"]):
        raise IntegrityError(f"{csv_path.name}: recomputed post-onset rate {late} differs")
    volumes = frame["log_volume"].dropna()
    return {
        **summary,
        "log_volume": {
            "mean": float(volumes.mean()) if len(volumes) else None,
            "min": float(volumes.min()) if len(volumes) else None,
            "max": float(volumes.max()) if len(volumes) else None,
        },
    }


def _input_qc_report(ctx: RunContext) -> dict[str, Any] | None:
    path = ctx.path(INPUT_QC_FILE)
    if not path.exists():
        return None
    frame = read_frame(path)
    solved = frame[frame["status"] == "solved"]
    return {
        "steps": len(frame),
        "solved": len(solved),
        "dominated": int((solved["difference"] <= 1e-6).sum()),
        "max_difference": float(solved["difference"].max()) if len(solved) else None,
        "pairs": [
            {"k": int(k), "multi": float(multi), "single": float(single)}
            for k, multi, single in solved[["k", "multi", "single"]].itertuples(index=False)
        ],
    }


def _training_noise_report(ctx: RunContext) -> dict[str, Any] | None:
    path = ctx.path(TRAINING_NOISE_FILE)
    if not path.exists():
        return None
    paired = read_frame(path).dropna()
    return {
        "steps": len(paired),
        "noisy_smaller_fraction": (
            float((paired["noisy"] <= paired["ideal"]).mean()) if len(paired) else 0.0
        ),
        "mean_noisy_log_volume": float(paired["noisy"].mean()) if len(paired) else None,
        "mean_ideal_log_volume": float(paired["ideal"].mean()) if len(paired) else None,
    }


def cmd_report(ctx: RunContext, args: argparse.Namespace) -> int:
    """Verify every recorded file and consolidate the results."""
    cfg = ctx.cfg
    manifest = _verify_manifest(ctx)
    if manifest.get("config_hash") != cfg.config_hash:
        raise IntegrityError("run directory was produced by a different configuration")

    scenarios = {
        path.stem: _scenario_report(ctx, path)
        for path in sorted(ctx.path(ALARM_DIR).glob("*.json"))
    }
    metrics_path = ctx.path(METRICS_FILE)
    report = ExperimentReport(
        scenarios=scenarios,
        training=read_json(metrics_path) if metrics_path.exists() else {},
        input_qcs=_input_qc_report(ctx),
        training_noise=_training_noise_report(ctx),
        provenance={
            "config": cfg.name,
            "config_hash": cfg.config_hash,
            "system": cfg.system,
            "training_seed": cfg.training.seed,
            "detection_seed": cfg.detection_seed,
            "g": getattr(cfg.plant, "g", None),
            "window": cfg.window,
            "p_bar": cfg.p_bar,
            "false_alarm_bound": false_alarm_bound(cfg.p_bar, cfg.window),
            "detection_steps": cfg.detection_steps,
        },
    )
    write_json(ctx.path(REPORT_FILE), report.to_dict())
    atomic_write_text(ctx.path(SUMMARY_FILE), report.summary_text())
    _LOGGER.info("Report written to %s", ctx.path(REPORT_FILE))
    return EXIT_OK


COMMANDS: dict[str, Callable[[RunContext, argparse.Namespace], int]] = {
    "simulate": cmd_simulate,
    "train": cmd_train,
    "detect": cmd_detect,
    "compare-input-qcs": cmd_compare_input_qcs,
    "compare-training-noise": cmd_compare_training_noise,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    """Return the argument parser."""
    parser = argparse.ArgumentParser(
        prog="narx-guard",
        description="Certified NARX prediction bounds and anomaly detection.",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="log at DEBUG level")
    parser.add_argument(
        "--backend", default=None, help="solver backend, e.g. cvxpy or cvxpy:SCS"
    )
    parser.add_argument("--output", default=None, help="run directory")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name: str, help_text: str) -> argparse.ArgumentParser:
        cmd = sub.add_parser(name, help=help_text)
        cmd.add_argument("config", help="config file or preset name (beam, tanks)")
        return cmd

    add("simulate", "simulate training and detection trajectories")
    train = add("train", "train the NARX estimator")
    train.add_argument("--ideal-data", action="store_true", help="train on noise-free data")

    detect = add("detect", "run the anomaly detector")
    detect.add_argument("--scenario", default=None)
    detect.add_argument("--weights", default=None)
    detect.add_argument("--trajectory", default=None)

    for name, help_text in (
        ("compare-input-qcs", "compare multi- and single-ellipsoid bounds"),
        ("compare-training-noise", "compare noisy- and ideal-trained bounds"),
    ):
        cmd = add(name, help_text)
        cmd.add_argument("--scenario", default=None)
        cmd.add_argument("--trajectory", default=None)
        cmd.add_argument("--steps", type=int, default=None)
        if name == "compare-input-qcs":
            cmd.add_argument("--weights", default=None)
            cmd.add_argument(
                "--dump-lmi", action="store_true", help="write each step's QC matrices and LMI"
            )

    add("report", "verify the run directory and write the report")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    """Entry point; returns the process exit code."""
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        ctx = _context(args)
        return COMMANDS[args.command](ctx, args)
    except (ConfigError, BackendUnavailableError) as err:
        _LOGGER.error("Configuration error: %s", err)
        return EXIT_CONFIG
    except NarxGuardError as err:
        _LOGGER.error("%s failed: %s", args.command, err)
        return EXIT_RUNTIME
