"""Synthetic device characterization and model fitting.

Counts are simulated at a set of heater power settings with the unknown
phases held at zero, then the device parameters are recovered by minimizing
the multinomial negative log-likelihood.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import minimize

from .device import (
    N_OUTCOMES,
    PROBE_INPUT,
    DeviceLikelihood,
    DeviceModel,
    QuarterParams,
    ThermalModel,
    powers_to_phases,
)
from .linear_optics import enumerate_basis

N_LEVELS = 10
LOW_SHOTS = 100
HEATERS = ("a", "b", "d")
# expected counts below this are left out of the chi-square
CHI2_MIN_EXPECTED = 5.0


class LowStatisticsWarning(UserWarning):
    """Too few shots per setting for the fit diagnostics to be meaningful."""


def _outcome_labels() -> list[str]:
    return ["".join(map(str, s)) for s in enumerate_basis(4, 2).states]


@dataclass
class CharacterizationDataset:
    """Per-setting outcome counts.

    ``settings[s]`` holds the powers (mW) on the heaters of phases A, B and D
    and ``counts[s]`` the 10 outcome counts recorded there.
    """

    settings: np.ndarray
    counts: np.ndarray
    shots: int
    input_state: tuple[int, ...] = PROBE_INPUT

    def __post_init__(self):
        self.settings = np.asarray(self.settings, dtype=float).reshape(-1, 3)
        self.counts = np.asarray(self.counts, dtype=np.int64).reshape(-1, N_OUTCOMES)
        if len(self.settings) != len(self.counts):
            raise ValueError("settings and counts disagree in length")
        if np.any(self.counts < 0):
            raise ValueError("counts must be non-negative")
        if len(self.counts) and np.any(self.counts.sum(axis=1) != self.shots):
            raise ValueError("counts must sum to the shots per setting")

    def __len__(self) -> int:
        return len(self.settings)

    def swept_heaters(self) -> tuple[int, ...]:
        return tuple(int(k) for k in np.flatnonzero(np.any(self.settings > 0, axis=0)))

    def subset(self, index) -> "CharacterizationDataset":
        return replace(self, settings=self.settings[index], counts=self.counts[index])

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow([f"power_{h}" for h in HEATERS]
                            + [f"n_{lab}" for lab in _outcome_labels()])
            for w, n in zip(self.settings, self.counts):
                writer.writerow([repr(float(x)) for x in w] + [int(c) for c in n])

    @classmethod
    def from_csv(cls, path, input_state=PROBE_INPUT) -> "CharacterizationDataset":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))[1:]
        settings = np.array([[float(x) for x in r[:3]] for r in rows]).reshape(-1, 3)
        counts = np.array([[int(x) for x in r[3:]] for r in rows]).reshape(-1, N_OUTCOMES)
        shots = int(counts[0].sum()) if len(counts) else 0
        return cls(settings, counts, shots, tuple(input_state))


def power_levels(limit: float = 30.0, n_levels: int = N_LEVELS) -> np.ndarray:
    return np.linspace(0.0, limit, n_levels)


def sweep_settings(levels, heaters=(0, 1, 2), pairwise: bool = True) -> np.ndarray:
    """Single-heater sweeps followed by pairwise sweeps.

    A pair is driven along the rising diagonal (both at level ``i``) and the
    crossed diagonal (levels ``i`` and ``n - 1 - i``) so cross-talk from
    either heater shows up with both signs of correlation.
    """
    levels = np.asarray(levels, dtype=float)
    rows = []
    for k in heaters:
        for w in levels:
            row = np.zeros(3)
            row[k] = w
            rows.append(row)
    if pairwise:
        for i, k in enumerate(heaters):
            for l in heaters[i + 1:]:
                for a, b in zip(levels, levels):
                    rows.append(_pair(k, l, a, b))
                for a, b in zip(levels, levels[::-1]):
                    rows.append(_pair(k, l, a, b))
    return np.unique(np.array(rows).reshape(-1, 3), axis=0)


def _pair(k, l, a, b) -> np.ndarray:
    row = np.zeros(3)
    row[k], row[l] = a, b
    return row


def setting_probabilities(model: DeviceModel, settings, input_state=PROBE_INPUT) -> np.ndarray:
    settings = np.asarray(settings, dtype=float).reshape(-1, 3)
    phases = powers_to_phases(model.thermal, settings)
    return DeviceLikelihood(model, input_state)(phases, np.zeros(3))


def generate_characterization(truth: DeviceModel, shots: int, seed=None,
                              levels=None, heaters=(0, 1, 2), pairwise: bool = True,
                              input_state=PROBE_INPUT) -> CharacterizationDataset:
    """Multinomial counts from ``truth`` over the heater sweeps."""
    if shots < 1:
        raise ValueError("shots must be at least 1")
    if levels is None:
        levels = power_levels(truth.thermal.power_limit)
    settings = sweep_settings(levels, heaters, pairwise)
    probs = setting_probabilities(truth, settings, input_state)
    rng = np.random.default_rng(seed)
    counts = np.array([rng.multinomial(shots, p / p.sum()) for p in probs])
    return CharacterizationDataset(settings, counts, int(shots), tuple(input_state))


@dataclass(frozen=True)
class FitSpec:
    """Which parameter groups are free; the rest stay at the initial model."""

    phi0: bool = True
    alpha: bool = True
    alpha2: bool = True
    reflectivities: bool = True
    visibility: bool = True
    efficiencies: bool = True

    def to_dict(self) -> dict:
        return dict(self.__dict__)


class ParameterMap:
    """Flat parameter vector <-> DeviceModel.

    Efficiencies enter only through their ratios, so they are stored relative
    to outcome 0 and rescaled to a maximum of one when rebuilding the model.
    The internal quarter phases and the current-to-power law are held fixed.
    """

    def __init__(self, base: DeviceModel, spec: FitSpec = FitSpec()):
        self.base = base
        self.spec = spec
        names, values, lower, upper = [], [], [], []

        def add(name, value, lo, hi):
            names.append(name)
            values.append(float(value))
            lower.append(lo)
            upper.append(hi)

        t = base.thermal
        if spec.phi0:
            for i, h in enumerate(HEATERS):
                add(f"phi0_{h}", t.phi0[i], t.phi0[i] - np.pi, t.phi0[i] + np.pi)
        if spec.alpha:
            for i, hi in enumerate(HEATERS):
                for k, hk in enumerate(HEATERS):
                    scale = abs(t.alpha[i, i]) or 1.0
                    add(f"alpha_{hi}{hk}", t.alpha[i, k], t.alpha[i, k] - scale,
                        t.alpha[i, k] + scale)
        if spec.alpha2:
            for i, h in enumerate(HEATERS):
                add(f"alpha2_{h}", t.alpha2[i], -0.01, 0.01)
        if spec.reflectivities:
            refl = base.quarter_in.reflectivities + base.quarter_out.reflectivities
            for j, r in enumerate(refl):
                add(f"refl_{j}", r, 0.05, 0.95)
        if spec.visibility:
            add("visibility", base.visibility, 0.0, 1.0)
        if spec.efficiencies:
            eff = base.efficiencies
            for j in range(1, N_OUTCOMES):
                add(f"eff_{j}", eff[j] / eff[0], 0.2, 5.0)
        self.names = names
        self.x0 = np.array(values)
        self.bounds = list(zip(lower, upper))

    def __len__(self) -> int:
        return len(self.names)

    def to_model(self, x) -> DeviceModel:
        x = iter(np.asarray(x, dtype=float))
        spec, base, t = self.spec, self.base, self.base.thermal
        phi0 = np.array([next(x) for _ in range(3)]) if spec.phi0 else t.phi0
        alpha = np.array([next(x) for _ in range(9)]).reshape(3, 3) if spec.alpha else t.alpha
        alpha2 = np.array([next(x) for _ in range(3)]) if spec.alpha2 else t.alpha2
        qin, qout = base.quarter_in, base.quarter_out
        if spec.reflectivities:
            refl = [next(x) for _ in range(8)]
            qin = QuarterParams(qin.phase_hi, qin.phase_lo, tuple(refl[:4]))
            qout = QuarterParams(qout.phase_hi, qout.phase_lo, tuple(refl[4:]))
        visibility = next(x) if spec.visibility else base.visibility
        eff = base.efficiencies
        if spec.efficiencies:
            ratios = np.array([1.0] + [next(x) for _ in range(N_OUTCOMES - 1)])
            eff = ratios / ratios.max()
        thermal = ThermalModel(alpha=alpha, alpha2=alpha2, phi0=phi0, r1=t.r1, r2=t.r2,
                               power_limit=t.power_limit)
        return DeviceModel(quarter_in=qin, quarter_out=qout, thermal=thermal,
                           visibility=float(np.clip(visibility, 0.0, 1.0)), efficiencies=eff)


def negative_log_likelihood(model: DeviceModel, data: CharacterizationDataset) -> float:
    """Multinomial NLL without the model-independent combinatorial term."""
    if len(data) == 0:
        return 0.0
    p = setting_probabilities(model, data.settings, data.input_state)
    with np.errstate(divide="ignore"):
        logp = np.log(p)
    mask = data.counts > 0
    if np.any(~np.isfinite(logp[mask])):
        return np.inf
    return float(-np.sum(data.counts[mask] * logp[mask]))


@dataclass
class FitResult:
    model: DeviceModel
    objective: float
    converged: bool
    parameter_names: list[str]
    parameters: np.ndarray
    start_objectives: list[float]
    n_evaluations: int
    non_identifiable: list[str] = field(default_factory=list)
    hessian_eigenvalues: np.ndarray | None = None

    @property
    def flagged(self) -> bool:
        return not self.converged

    def to_dict(self) -> dict:
        return {
            "model": self.model.to_dict(),
            "objective": self.objective,
            "converged": self.converged,
            "parameters": dict(zip(self.parameter_names, self.parameters.tolist())),
            "start_objectives": list(self.start_objectives),
            "n_evaluations": self.n_evaluations,
            "non_identifiable": list(self.non_identifiable),
        }


def _hessian(f, x: np.ndarray, steps: np.ndarray) -> np.ndarray:
    n = len(x)
    f0 = f(x)
    H = np.zeros((n, n))
    fp = np.empty(n)
    fm = np.empty(n)
    for i in range(n):
        e = np.zeros(n)
        e[i] = steps[i]
        fp[i], fm[i] = f(x + e), f(x - e)
        H[i, i] = (fp[i] - 2 * f0 + fm[i]) / steps[i] ** 2
    for i in range(n):
        for j in range(i + 1, n):
            ei = np.zeros(n)
            ej = np.zeros(n)
            ei[i], ej[j] = steps[i], steps[j]
            fpp = f(x + ei + ej)
            fmm = f(x - ei - ej)
            # uses f(x +- e_i) already evaluated on the diagonal
            H[i, j] = H[j, i] = (fpp + fmm + 2 * f0 - fp[i] - fm[i] - fp[j] - fm[j]) / (
                2 * steps[i] * steps[j])
    return H


def flat_directions(hessian: np.ndarray, names, min_curvature: float = 1.0,
                    weight_tol: float = 0.1) -> tuple[list[str], np.ndarray]:
    """Parameters that load on near-flat directions of the objective.

    ``hessian`` is expressed in scaled units where a unit step spans half a
    parameter's allowed range. A direction whose curvature is below
    ``min_curvature`` moves the NLL by less than about one half across that
    range and carries no usable information.
    """
    evals, evecs = np.linalg.eigh(0.5 * (hessian + hessian.T))
    flagged = set()
    for k in np.flatnonzero(evals < min_curvature):
        for j in np.flatnonzero(evecs[:, k] ** 2 > weight_tol):
            flagged.add(names[j])
    return [n for n in names if n in flagged], evals


def fit_model(data: CharacterizationDataset, initial: DeviceModel, spec: FitSpec = FitSpec(),
              n_starts: int = 5, seed=0, start_spread: float = 0.05,
              max_evaluations: int = 40000, xtol: float = 1e-6, ftol: float = 1e-10,
              probe_curvature: bool = True) -> FitResult:
    """Multi-start bounded Powell search of the multinomial NLL.

    The first start is ``initial``; the others scatter its parameters by a
    relative ``start_spread``. A start that exhausts ``max_evaluations``
    leaves the result flagged as not converged.
    """
    if len(data) == 0:
        raise ValueError("cannot fit an empty dataset")
    if data.shots < LOW_SHOTS:
        warnings.warn(f"only {data.shots} shots per setting", LowStatisticsWarning, stacklevel=2)
    pmap = ParameterMap(initial, spec)
    lower = np.array([b[0] for b in pmap.bounds])
    upper = np.array([b[1] for b in pmap.bounds])

    def objective(x):
        try:
            return negative_log_likelihood(pmap.to_model(x), data)
        except ValueError:
            return np.inf

    rng = np.random.default_rng(seed)
    starts = [pmap.x0]
    for _ in range(n_starts - 1):
        jitter = 1.0 + start_spread * rng.uniform(-1, 1, size=len(pmap))
        starts.append(np.clip(pmap.x0 * jitter, lower, upper))
    best = None
    start_objectives = []
    n_eval = 0
    converged_any = False
    for x0 in starts:
        res = minimize(objective, x0, method="Powell", bounds=pmap.bounds,
                       options={"maxfev": max_evaluations, "xtol": xtol, "ftol": ftol})
        n_eval += int(res.nfev)
        start_objectives.append(float(res.fun))
        if best is None or res.fun < best.fun:
            best = res
            converged_any = bool(res.success)
    non_ident, evals = [], None
    if probe_curvature:
        scale = 0.5 * (upper - lower)
        H = _hessian(objective, best.x, 1e-4 * scale) * np.outer(scale, scale)
        non_ident, evals = flat_directions(H, pmap.names)
    return FitResult(
        model=pmap.to_model(best.x), objective=float(best.fun), converged=converged_any,
        parameter_names=list(pmap.names), parameters=np.array(best.x),
        start_objectives=start_objectives, n_evaluations=n_eval,
        non_identifiable=non_ident, hessian_eigenvalues=evals,
    )


@dataclass
class FitReport:
    chi2: np.ndarray  # per setting
    dof: np.ndarray
    total_chi2: float
    total_dof: int
    reduced_chi2: float
    residuals: list[dict]
    low_statistics: bool = False

    def to_dict(self) -> dict:
        return {
            "total_chi2": self.total_chi2,
            "total_dof": self.total_dof,
            "reduced_chi2": self.reduced_chi2,
            "per_setting_chi2": self.chi2.tolist(),
            "per_setting_dof": self.dof.tolist(),
            "low_statistics": self.low_statistics,
        }

    def write_residuals_csv(self, path) -> None:
        cols = ["setting", "power_a", "power_b", "power_d", "outcome", "observed",
                "expected", "pearson_residual"]
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=cols)
            writer.writeheader()
            writer.writerows(self.residuals)


def fit_report(fitted: DeviceModel, data: CharacterizationDataset, n_fitted: int = 0) -> FitReport:
    """Pearson chi-square of ``data`` against ``fitted``.

    Each setting contributes (number of retained outcomes - 1) degrees of
    freedom; ``n_fitted`` parameters are subtracted from the total.
    """
    labels = _outcome_labels()
    if len(data) == 0:
        return FitReport(np.zeros(0), np.zeros(0, dtype=int), 0.0, 0, float("nan"), [])
    p = setting_probabilities(fitted, data.settings, data.input_state)
    expected = data.shots * p
    chi2 = np.zeros(len(data))
    dof = np.zeros(len(data), dtype=int)
    residuals = []
    for s in range(len(data)):
        keep = expected[s] >= CHI2_MIN_EXPECTED
        r = (data.counts[s] - expected[s]) / np.sqrt(np.maximum(expected[s], 1e-300))
        chi2[s] = float(np.sum(r[keep] ** 2))
        dof[s] = max(int(keep.sum()) - 1, 0)
        for d in range(N_OUTCOMES):
            residuals.append({
                "setting": s,
                "power_a": data.settings[s, 0],
                "power_b": data.settings[s, 1],
                "power_d": data.settings[s, 2],
                "outcome": labels[d],
                "observed": int(data.counts[s, d]),
                "expected": float(expected[s, d]),
                "pearson_residual": float(r[d]),
            })
    total_dof = int(dof.sum()) - n_fitted
    total = float(chi2.sum())
    reduced = total / total_dof if total_dof > 0 else float("nan")
    return FitReport(chi2, dof, total, total_dof, reduced, residuals,
                     low_statistics=data.shots < LOW_SHOTS)


def split_holdout(data: CharacterizationDataset, fraction: float = 0.2, seed=0):
    """Random train/holdout split of the settings."""
    rng = np.random.default_rng(seed)
    idx = rng.permutation(len(data))
    n_hold = int(round(fraction * len(data)))
    hold = np.sort(idx[:n_hold])
    train = np.sort(idx[n_hold:])
    return data.subset(train), data.subset(hold)


def perturb_model(model: DeviceModel, spec: FitSpec = FitSpec(), rel: float = 0.1,
                  seed=0) -> DeviceModel:
    """Scale every free parameter by an independent factor in [1 - rel, 1 + rel]."""
    pmap = ParameterMap(model, spec)
    rng = np.random.default_rng(seed)
    x = pmap.x0 * (1.0 + rel * rng.uniform(-1, 1, size=len(pmap)))
    lower = np.array([b[0] for b in pmap.bounds])
    upper = np.array([b[1] for b in pmap.bounds])
    return pmap.to_model(np.clip(x, lower, upper))
