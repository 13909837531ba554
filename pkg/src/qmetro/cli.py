"""Command-line driver: ``qmetro {bounds,estimate,calibrate}``.

Every command resolves its configuration (file, then ``--seed`` and
``--threads`` overrides), writes it into ``manifest.json`` in the output
directory, and can be re-run exactly from that manifest via ``--config``.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import warnings
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import __version__, kernels
from .adaptive import (
    EstimationConfig,
    campaign_manifest,
    default_workers,
    run_campaign,
    write_manifest,
)
from .calibration import (
    FitSpec,
    LowStatisticsWarning,
    fit_model,
    fit_report,
    generate_characterization,
    perturb_model,
    power_levels,
    split_holdout,
)
from .device import DEFAULT_PERTURBED_SEED, DeviceModel, probe_state
from .estimation_theory import (
    linear_combination_bound,
    min_crb_search,
    optimal_combination,
    optimal_single_photon_bound,
    qfi_pure,
    resolve_mode,
    sample_traces,
    density_from_traces,
    scan_slice,
    sequential_bound,
    trace_inverse,
    write_scan_csv,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3


class ConfigError(ValueError):
    """Malformed or inconsistent run configuration."""


def _build(cls, data: dict | None, where: str):
    data = {} if data is None else data
    if not isinstance(data, dict):
        raise ConfigError(f"'{where}' must be a JSON object")
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown keys in '{where}': {sorted(unknown)}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid '{where}': {exc}") from exc


@dataclass
class DeviceSpec:
    kind: str = "ideal"  # ideal | perturbed | file
    seed: int = DEFAULT_PERTURBED_SEED
    path: str | None = None
    visibility: float | None = None

    def __post_init__(self):
        if self.kind not in ("ideal", "perturbed", "file"):
            raise ValueError(f"device kind must be ideal, perturbed or file, got {self.kind!r}")
        if self.kind == "file" and not self.path:
            raise ValueError("device kind 'file' needs a path")

    def build(self) -> DeviceModel:
        if self.kind == "ideal":
            model = DeviceModel.ideal()
        elif self.kind == "perturbed":
            model = DeviceModel.perturbed(self.seed)
        else:
            import jsonschema

            try:
                model = DeviceModel.load(self.path)
            except FileNotFoundError as exc:
                raise ConfigError(f"device file not found: {self.path}") from exc
            except (json.JSONDecodeError, jsonschema.ValidationError) as exc:
                raise ConfigError(f"invalid device file {self.path}: {exc}") from exc
        if self.visibility is not None:
            model = model.with_visibility(self.visibility)
        return model


@dataclass
class BoundsConfig:
    grid_points_per_axis: int = 30
    n_refine: int = 10
    density_samples: int = 10 ** 4
    thresholds: list[float] = field(default_factory=lambda: [2.6, 2.8, 3.0])
    slice_grid_points: int = 50
    slices: list[dict] = field(default_factory=lambda: [{"axis": "D", "value": 0.0}])
    n_probes: int = 2

    def __post_init__(self):
        for s in self.slices:
            if set(s) != {"axis", "value"} or s["axis"] not in ("A", "B", "D"):
                raise ValueError(f"slice entries need axis in A/B/D and a value, got {s}")


@dataclass
class CampaignConfig:
    n_triplets: int = 12
    repetitions: int = 30
    M: int = 100
    baseline: bool = False

    def __post_init__(self):
        if self.n_triplets < 1 or self.repetitions < 0 or self.M < 0:
            raise ValueError("campaign sizes must be non-negative (at least one triplet)")


@dataclass
class CalibrationConfig:
    shots: int = 10 ** 5
    levels: int = 10
    pairwise: bool = True
    n_starts: int = 5
    perturbation: float = 0.1
    holdout_fraction: float = 0.2
    fit: dict = field(default_factory=lambda: FitSpec().to_dict())

    def __post_init__(self):
        if self.shots < 1:
            raise ValueError("shots must be at least 1")
        _build(FitSpec, self.fit, "calibration.fit")


@dataclass
class RunConfig:
    device: DeviceSpec = field(default_factory=DeviceSpec)
    mode: str | float = "device"
    seed: int = 0
    threads: int | None = None
    out: str = "qmetro_out"
    bounds: BoundsConfig = field(default_factory=BoundsConfig)
    estimation: EstimationConfig = field(default_factory=EstimationConfig)
    campaign: CampaignConfig = field(default_factory=CampaignConfig)
    calibration: CalibrationConfig = field(default_factory=CalibrationConfig)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["estimation"] = self.estimation.to_dict()
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        if not isinstance(data, dict):
            raise ConfigError("configuration must be a JSON object")
        if "config" in data and "command" in data:
            data = data["config"]  # a manifest written by a previous run
        data = dict(data)
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown configuration keys: {sorted(unknown)}")
        parts = {
            "device": _build(DeviceSpec, data.pop("device", None), "device"),
            "bounds": _build(BoundsConfig, data.pop("bounds", None), "bounds"),
            "campaign": _build(CampaignConfig, data.pop("campaign", None), "campaign"),
            "calibration": _build(CalibrationConfig, data.pop("calibration", None),
                                  "calibration"),
        }
        est = data.pop("estimation", None) or {}
        unknown = set(est) - {f.name for f in fields(EstimationConfig)}
        if unknown:
            raise ConfigError(f"unknown keys in 'estimation': {sorted(unknown)}")
        try:
            parts["estimation"] = EstimationConfig.from_dict(est)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid 'estimation': {exc}") from exc
        config = cls(**parts, **data)
        try:
            resolve_mode(DeviceModel.ideal(), config.mode)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        return config


def load_config(path: str | None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc.strerror}") from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    return RunConfig.from_dict(data)


def _dump(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _manifest(command: str, config: RunConfig, device: DeviceModel, **extra) -> dict:
    m = {
        "command": command,
        "config": config.to_dict(),
        "device_sha256": device.digest(),
        "version": __version__,
        "kernel_backend": kernels.BACKEND,
    }
    m.update(extra)
    return m


def _slice_name(axis: str, value: float) -> str:
    return f"slice_{axis}_{value:g}.csv"


def cmd_bounds(config: RunConfig) -> dict:
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    device = config.device.build()
    bc = config.bounds
    Q = qfi_pure(probe_state(device))
    comb = optimal_combination(Q)
    search = {
        mode: min_crb_search(device, mode, bc.grid_points_per_axis, bc.n_refine)
        for mode in ("indistinguishable", "distinguishable")
    }
    if config.mode not in search:
        search[config.mode] = min_crb_search(device, config.mode, bc.grid_points_per_axis,
                                             bc.n_refine)
    traces = sample_traces(device, config.mode, bc.density_samples, seed=config.seed)
    densities = [density_from_traces(traces, t) for t in bc.thresholds]
    result = {
        "qfi": Q.tolist(),
        "qcrb_trace": trace_inverse(Q),
        "indist_min": search["indistinguishable"].min_trace,
        "dist_min": search["distinguishable"].min_trace,
        "mode": config.mode,
        "mode_min": search[config.mode].min_trace,
        "mode_argmins": [a.tolist() for a in search[config.mode].argmins],
        "classical_opt": optimal_single_photon_bound(3, bc.n_probes),
        "numax": comb.nu.tolist(),
        "numax_bound": comb.value,
        "numax_bound_check": linear_combination_bound(Q, comb.nu),
        "sequential": sequential_bound(comb.nu, bc.n_probes),
        "densities": [asdict(d) for d in densities],
    }
    _dump(out / "bounds.json", result)
    files = ["bounds.json"]
    for s in bc.slices:
        rows = scan_slice(device, config.mode, s["axis"], float(s["value"]),
                          bc.slice_grid_points)
        name = _slice_name(s["axis"], float(s["value"]))
        write_scan_csv(out / name, rows)
        files.append(name)
    write_manifest(out / "manifest.json", _manifest("bounds", config, device, files=files))
    return result


def cmd_estimate(config: RunConfig) -> dict:
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    device = resolve_mode(config.device.build(), config.mode)
    cc = config.campaign
    workers = config.threads if config.threads is not None else default_workers()
    result = run_campaign(device, cc.n_triplets, cc.repetitions, cc.M, config.estimation,
                          seed=config.seed, workers=workers)
    result.write_trajectories_csv(out / "trajectories.csv")
    result.write_aggregate_csv(out / "aggregate.csv")
    files = ["trajectories.csv", "aggregate.csv"]
    summary = {"n_runs": result.n_runs}
    if result.n_runs and cc.M > 0:
        summary["final_M_mean_quad_loss"] = float(cc.M * result.mean_loss()[-1])
        summary["final_M_mean_comb_loss"] = float(cc.M * result.mean_comb_loss()[-1])
    if cc.baseline:
        base_cfg = EstimationConfig.from_dict({**config.estimation.to_dict(), "adaptive": False})
        base = run_campaign(device, M=cc.M, repetitions=cc.repetitions, config=base_cfg,
                            seed=config.seed, workers=workers, triplets=result.triplets)
        base.write_trajectories_csv(out / "baseline_trajectories.csv")
        base.write_aggregate_csv(out / "baseline_aggregate.csv")
        files += ["baseline_trajectories.csv", "baseline_aggregate.csv"]
    manifest = campaign_manifest(result, config.estimation, device.digest(),
                                 extra=_manifest("estimate", config, device, files=files))
    write_manifest(out / "manifest.json", manifest)
    return summary


def cmd_calibrate(config: RunConfig) -> dict:
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    cal = config.calibration
    truth = config.device.build()
    spec = FitSpec(**cal.fit)
    data_ss, split_ss, init_ss, fit_ss = np.random.SeedSequence(config.seed).spawn(4)
    messages = []
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", LowStatisticsWarning)
        data = generate_characterization(truth, cal.shots, seed=data_ss,
                                         levels=power_levels(truth.thermal.power_limit, cal.levels),
                                         pairwise=cal.pairwise)
        train, holdout = split_holdout(data, cal.holdout_fraction, seed=split_ss)
        initial = perturb_model(truth, spec, cal.perturbation, seed=init_ss)
        fit = fit_model(train, initial, spec, n_starts=cal.n_starts, seed=fit_ss)
    for w in caught:
        if issubclass(w.category, LowStatisticsWarning):
            messages.append(f"low statistics: {w.message}")
    for msg in messages:
        print(f"warning: {msg}", file=sys.stderr)
    train_report = fit_report(fit.model, train, len(fit.parameters))
    hold_report = fit_report(fit.model, holdout)
    data.to_csv(out / "dataset.csv")
    (out / "fitted_model.json").write_text(fit.model.to_json() + "\n")
    _dump(out / "fit_result.json", fit.to_dict())
    train_report.write_residuals_csv(out / "residuals.csv")
    hold_report.write_residuals_csv(out / "holdout_residuals.csv")
    diag_t = np.diag(truth.thermal.alpha)
    report = {
        "objective": fit.objective,
        "converged": fit.converged,
        "non_identifiable": fit.non_identifiable,
        "train": train_report.to_dict(),
        "holdout": hold_report.to_dict(),
        "alpha_diag_rel_error": (np.diag(fit.model.thermal.alpha) / diag_t - 1).tolist(),
        "visibility_error": fit.model.visibility - truth.visibility,
        "warnings": messages,
    }
    _dump(out / "calibration_report.json", report)
    files = ["dataset.csv", "fitted_model.json", "fit_result.json", "residuals.csv",
             "holdout_residuals.csv", "calibration_report.json"]
    write_manifest(out / "manifest.json", _manifest("calibrate", config, truth, files=files))
    return report


COMMANDS = {"bounds": cmd_bounds, "estimate": cmd_estimate, "calibrate": cmd_calibrate}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="qmetro", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "bounds": "Fisher-information bounds, threshold densities and slice scans",
        "estimate": "adaptive estimation campaign",
        "calibrate": "synthetic characterization data and model fit",
    }
    for name, text in helps.items():
        p = sub.add_parser(name, help=text)
        p.add_argument("--config", help="JSON run configuration or a previous manifest")
        p.add_argument("--seed", type=int, help="master seed (overrides the config)")
        p.add_argument("--out", help="output directory (overrides the config)")
        p.add_argument("--threads", type=int,
                       help="worker processes (overrides the config and QMETRO_THREADS)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = load_config(args.config)
        if args.seed is not None:
            config.seed = args.seed
        if args.out is not None:
            config.out = args.out
        if args.threads is not None:
            if args.threads < 1:
                raise ConfigError("--threads must be at least 1")
            config.threads = args.threads
        elif config.threads is None and os.environ.get("QMETRO_THREADS"):
            config.threads = default_workers()
        summary = COMMANDS[args.command](config)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FloatingPointError, ArithmeticError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    print(json.dumps(summary, indent=2, sort_keys=True, default=float))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
