"""Fisher information, Cramer-Rao bounds and the comparison bounds.

All bounds are per probe; divide by the number of probes to scale.
"""

from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import minimize, minimize_scalar

from .device import (
    PROBE_INPUT,
    TWO_PI,
    UNKNOWN_MODES,
    DeviceLikelihood,
    DeviceModel,
    device_unitary,
    probe_state,
    quarter_unitary,
)
from .linear_optics import (
    PureState,
    as_occupation,
    enumerate_basis,
    evolve,
    permanent,
)

FD_STEP = 1e-5
P_FLOOR = 1e-12
DIVERGENCE = 1e4
AXES = {"A": 0, "B": 1, "D": 2}


@dataclass
class FisherReport:
    phases: np.ndarray
    fi: np.ndarray
    fi_inv_trace: float
    qfi: np.ndarray | None = None
    qcrb_trace: float | None = None


@dataclass
class CombinationBound:
    nu: np.ndarray
    value: float


@dataclass
class CRBSearch:
    min_trace: float
    argmins: list[np.ndarray]
    grid_min: float
    grid_points_per_axis: int


@dataclass
class DensityEstimate:
    threshold: float
    density: float
    stderr: float
    divergence_fraction: float
    n_samples: int


def _fi_from_derivatives(p: np.ndarray, dp: np.ndarray) -> np.ndarray:
    # dp has shape (3, n_outcomes)
    keep = p > P_FLOOR
    g = dp[:, keep]
    return (g / p[keep]) @ g.T


def fi_matrix(likelihood_fn: Callable[[np.ndarray], np.ndarray], phases,
              h: float = FD_STEP) -> np.ndarray:
    """Classical Fisher information by central finite differences."""
    x = np.asarray(phases, dtype=float)
    p = np.asarray(likelihood_fn(x), dtype=float)
    if not np.all(np.isfinite(p)):
        raise FloatingPointError("likelihood returned non-finite probabilities")
    dp = np.empty((len(x), len(p)))
    for k in range(len(x)):
        e = np.zeros_like(x)
        e[k] = h
        dp[k] = (np.asarray(likelihood_fn(x + e)) - np.asarray(likelihood_fn(x - e))) / (2 * h)
    F = _fi_from_derivatives(p, dp)
    return 0.5 * (F + F.T)


def trace_inverse(F) -> float:
    """Tr(F^-1), infinite when F is singular to working precision."""
    F = np.asarray(F, dtype=float)
    w = np.linalg.eigvalsh(F)
    if w[0] <= 1e-12 * max(w[-1], 1e-300):
        return math.inf
    return float(np.sum(1.0 / w))


def trace_inverse_batch(F: np.ndarray) -> np.ndarray:
    w = np.linalg.eigvalsh(F)
    bad = w[:, 0] <= 1e-12 * np.maximum(w[:, -1], 1e-300)
    with np.errstate(divide="ignore"):
        out = np.sum(1.0 / np.where(bad[:, None], 1.0, w), axis=1)
    out[bad] = np.inf
    return out


def resolve_mode(model: DeviceModel, mode) -> DeviceModel:
    """Apply a photon-distinguishability mode to a device.

    ``mode`` is ``"indistinguishable"``, ``"distinguishable"``, ``"device"``
    (keep the model's own visibility) or a visibility value.
    """
    if mode is None or mode == "device":
        return model
    if mode == "indistinguishable":
        return model.with_visibility(1.0)
    if mode == "distinguishable":
        return model.with_visibility(0.0)
    if isinstance(mode, (int, float)):
        return model.with_visibility(float(mode))
    raise ValueError(f"unknown mode {mode!r}")


def fi_batch(lik: DeviceLikelihood, phases, control=(0.0, 0.0, 0.0),
             h: float = FD_STEP) -> np.ndarray:
    """Finite-difference FI matrices for many phase triples at once, shape (N, 3, 3)."""
    x = np.atleast_2d(np.asarray(phases, dtype=float))
    n = len(x)
    shifts = np.zeros((7, 3))
    for k in range(3):
        shifts[1 + 2 * k, k] = h
        shifts[2 + 2 * k, k] = -h
    stacked = (x[None, :, :] + shifts[:, None, :]).reshape(-1, 3)
    probs = lik(stacked, control).reshape(7, n, -1)
    p = probs[0]
    dp = np.stack([(probs[1 + 2 * k] - probs[2 + 2 * k]) / (2 * h) for k in range(3)], axis=1)
    keep = p > P_FLOOR
    inv_p = np.where(keep, 1.0 / np.where(keep, p, 1.0), 0.0)
    F = np.einsum("nio,no,njo->nij", dp, inv_p, dp)
    return 0.5 * (F + np.transpose(F, (0, 2, 1)))


def trace_fi_inv(model: DeviceModel, phases, mode="device",
                 input_state=PROBE_INPUT) -> np.ndarray:
    lik = DeviceLikelihood(resolve_mode(model, mode), input_state)
    x = np.atleast_2d(np.asarray(phases, dtype=float))
    out = np.empty(len(x))
    chunk = 20000
    for start in range(0, len(x), chunk):
        out[start:start + chunk] = trace_inverse_batch(fi_batch(lik, x[start:start + chunk]))
    return out


# -- analytic amplitude-derivative route -------------------------------------

def _perm_derivative(A: np.ndarray, dA: np.ndarray) -> complex:
    k = A.shape[0]
    total = 0j
    for i, j in itertools.product(range(k), repeat=2):
        if dA[i, j] == 0:
            continue
        minor = np.delete(np.delete(A, i, axis=0), j, axis=1)
        total += dA[i, j] * permanent(minor)
    return total


def fi_matrix_analytic(model: DeviceModel, phases, control=(0.0, 0.0, 0.0),
                       input_state=PROBE_INPUT) -> np.ndarray:
    """Fisher information from exact derivatives of the transition amplitudes.

    Independent of the finite-difference path: derivatives of the permanents
    are expanded over minors and pushed through the visibility mixture and
    the efficiency renormalization by hand.
    """
    s = as_occupation(input_state)
    total_phase = np.asarray(phases, dtype=float) + np.asarray(control, dtype=float)
    qin = quarter_unitary(model.quarter_in)
    qout = quarter_unitary(model.quarter_out)
    U = device_unitary(model, phases, control)
    layer = np.exp(1j * np.array([total_phase[2], 0.0, total_phase[1], total_phase[0]]))
    dU = []
    for mode in UNKNOWN_MODES:
        d = np.zeros(4, dtype=complex)
        d[mode] = 1j * layer[mode]
        dU.append(qout @ np.diag(d) @ qin)

    basis = enumerate_basis(4, sum(s))
    cols = [m for m, c in enumerate(s) for _ in range(c)]
    ns = math.prod(math.factorial(c) for c in s)
    n_out = len(basis)
    p_ind = np.empty(n_out)
    dp_ind = np.empty((3, n_out))
    for o, t in enumerate(basis.states):
        rows = [m for m, c in enumerate(t) for _ in range(c)]
        norm = math.sqrt(ns * math.prod(math.factorial(c) for c in t))
        A = U[np.ix_(rows, cols)]
        amp = permanent(A) / norm
        p_ind[o] = abs(amp) ** 2
        for k in range(3):
            damp = _perm_derivative(A, dU[k][np.ix_(rows, cols)]) / norm
            dp_ind[k, o] = 2.0 * (np.conj(amp) * damp).real

    single = np.abs(U) ** 2
    dsingle = [2.0 * (np.conj(U) * dUk).real for dUk in dU]
    p_dist = np.zeros(n_out)
    dp_dist = np.zeros((3, n_out))
    for outputs in itertools.product(range(4), repeat=len(cols)):
        occ = [0] * 4
        for dst in outputs:
            occ[dst] += 1
        o = basis.index(occ)
        factors = [single[dst, src] for src, dst in zip(cols, outputs)]
        p_dist[o] += math.prod(factors)
        for k in range(3):
            for i, (src, dst) in enumerate(zip(cols, outputs)):
                rest = math.prod(f for j, f in enumerate(factors) if j != i)
                dp_dist[k, o] += dsingle[k][dst, src] * rest

    V = model.visibility
    eta = model.efficiencies
    q = eta * (V * p_ind + (1 - V) * p_dist)
    dq = eta * (V * dp_ind + (1 - V) * dp_dist)
    S = q.sum()
    dS = dq.sum(axis=1)
    p = q / S
    dp = dq / S - q[None, :] * dS[:, None] / S ** 2
    F = _fi_from_derivatives(p, dp)
    return 0.5 * (F + F.T)


# -- quantum Fisher information ----------------------------------------------

def qfi_pure(probe: PureState, generators: Sequence[int] = UNKNOWN_MODES) -> np.ndarray:
    """QFI of a pure probe for phases generated by mode number operators.

    Equals four times the covariance matrix of the photon numbers on the
    probed arms; the remaining mode is the phase reference.
    """
    p = probe.probabilities()
    p = p / p.sum()
    N = probe.occupation_matrix()[:, list(generators)].astype(float)
    mean = p @ N
    second = N.T @ (p[:, None] * N)
    return 4.0 * (second - np.outer(mean, mean))


def fisher_report(model: DeviceModel, phases, mode="device",
                  input_state=PROBE_INPUT) -> FisherReport:
    m = resolve_mode(model, mode)
    lik = DeviceLikelihood(m, input_state)
    x = np.asarray(phases, dtype=float)
    F = fi_matrix(lik.single, x)
    Q = qfi_pure(probe_state(m, input_state))
    return FisherReport(phases=x, fi=F, fi_inv_trace=trace_inverse(F), qfi=Q,
                        qcrb_trace=trace_inverse(Q))


# -- searches over the phase torus -------------------------------------------

def _torus_distance(a: np.ndarray, b: np.ndarray) -> float:
    d = np.mod(a - b + np.pi, TWO_PI) - np.pi
    return float(np.max(np.abs(d)))


def min_crb_search(model: DeviceModel, mode="device", grid_points_per_axis: int = 30,
                   n_refine: int = 10, input_state=PROBE_INPUT,
                   tol: float = 1e-3) -> CRBSearch:
    """Global minimum of Tr(F^-1) over the phase torus.

    A coarse grid over [0, 2 pi)^3 seeds Nelder-Mead refinements from the
    ``n_refine`` best cells. All refined minima within ``tol`` of the best
    one are returned, deduplicated modulo 2 pi.
    """
    if grid_points_per_axis < 20:
        raise ValueError("use at least 20 grid points per axis")
    g = np.arange(grid_points_per_axis) * TWO_PI / grid_points_per_axis
    grid = np.array(np.meshgrid(g, g, g, indexing="ij")).reshape(3, -1).T
    m = resolve_mode(model, mode)
    traces = trace_fi_inv(m, grid, input_state=input_state)
    finite = np.isfinite(traces)
    if not finite.any():
        raise FloatingPointError("Fisher information singular on every grid point")
    order = np.argsort(np.where(finite, traces, np.inf), kind="stable")[:n_refine]
    lik = DeviceLikelihood(m, input_state)

    def objective(x):
        v = trace_inverse_batch(fi_batch(lik, x[None, :]))[0]
        return min(v, 1e6)

    refined = []
    for idx in order:
        if not np.isfinite(traces[idx]):
            continue
        res = minimize(objective, grid[idx], method="Nelder-Mead",
                       options={"xatol": 1e-9, "fatol": 1e-12, "maxiter": 5000})
        refined.append((float(res.fun), np.mod(res.x, TWO_PI)))
    best = min(v for v, _ in refined)
    argmins: list[np.ndarray] = []
    for v, x in sorted(refined, key=lambda r: r[0]):
        if v - best > tol:
            continue
        if all(_torus_distance(x, y) > 1e-2 for y in argmins):
            argmins.append(x)
    return CRBSearch(min_trace=best, argmins=argmins, grid_min=float(traces[finite].min()),
                     grid_points_per_axis=grid_points_per_axis)


def sample_traces(model: DeviceModel, mode="device", n_samples: int = 10 ** 4,
                  seed: int = 0, input_state=PROBE_INPUT) -> np.ndarray:
    rng = np.random.default_rng(seed)
    phases = rng.uniform(0.0, TWO_PI, size=(n_samples, 3))
    return trace_fi_inv(model, phases, mode, input_state)


def density_from_traces(traces: np.ndarray, t: float) -> DensityEstimate:
    n = len(traces)
    rho = float(np.mean(traces < t))
    return DensityEstimate(
        threshold=float(t),
        density=rho,
        stderr=math.sqrt(rho * (1 - rho) / n),
        divergence_fraction=float(np.mean(traces >= DIVERGENCE)),
        n_samples=n,
    )


def threshold_density(model: DeviceModel, mode, t: float, n_samples: int = 10 ** 4,
                      seed: int = 0, input_state=PROBE_INPUT) -> DensityEstimate:
    """Monte Carlo fraction of the phase torus where Tr(F^-1) < t."""
    if n_samples < 10 ** 4:
        raise ValueError("use at least 10^4 samples")
    return density_from_traces(sample_traces(model, mode, n_samples, seed, input_state), t)


def scan_slice(model: DeviceModel, mode, fixed_axis: str, fixed_value: float,
               grid_points: int = 50, input_state=PROBE_INPUT) -> np.ndarray:
    """Tr(F^-1) on a 2-D grid with one phase held fixed.

    Returns rows ``(phi_A, phi_B, phi_D, trace_fi_inv)``.
    """
    axis = AXES[fixed_axis]
    free = [i for i in range(3) if i != axis]
    g = np.arange(grid_points) * TWO_PI / grid_points
    u, v = np.meshgrid(g, g, indexing="ij")
    phases = np.empty((grid_points ** 2, 3))
    phases[:, axis] = fixed_value
    phases[:, free[0]] = u.ravel()
    phases[:, free[1]] = v.ravel()
    traces = trace_fi_inv(model, phases, mode, input_state)
    return np.column_stack([phases, traces])


def write_scan_csv(path, rows: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["phi_A", "phi_B", "phi_D", "trace_fi_inv"])
        for row in rows:
            writer.writerow([repr(float(x)) for x in row])


# -- comparison bounds -------------------------------------------------------

def linear_combination_bound(qfi, nu) -> float:
    """Variance bound nu^T F_Q^-1 nu on the combination nu . phi."""
    Q = np.asarray(qfi, dtype=float)
    nu = np.asarray(nu, dtype=float)
    if np.linalg.matrix_rank(Q) < Q.shape[0]:
        raise np.linalg.LinAlgError("QFI matrix is singular")
    return float(nu @ np.linalg.solve(Q, nu))


def optimal_combination(qfi) -> CombinationBound:
    """Combination weights along the top QFI eigenvector and their bound 1/lambda_max."""
    Q = np.asarray(qfi, dtype=float)
    w, v = np.linalg.eigh(0.5 * (Q + Q.T))
    top = np.flatnonzero(w >= w[-1] - 1e-12)[0]
    nu = v[:, top]
    lead = nu[np.flatnonzero(np.abs(nu) > 1e-12)[0]]
    nu = nu * np.sign(lead)
    return CombinationBound(nu=nu, value=float(1.0 / w[top]))


def sequential_bound_numeric(nu, total_mean_photons: float) -> float:
    """min over photon allocations of sum nu_i^2 / n_i with sum n_i fixed."""
    nu = np.asarray(nu, dtype=float)
    n = total_mean_photons
    d = len(nu)

    def cost(alloc):
        return float(np.sum(nu ** 2 / alloc))

    def grad(alloc):
        return -(nu ** 2) / alloc ** 2

    x0 = np.full(d, n / d)
    res = minimize(cost, x0, jac=grad, method="SLSQP",
                   bounds=[(1e-9 * n, n)] * d,
                   constraints=[{"type": "eq", "fun": lambda a: a.sum() - n,
                                 "jac": lambda a: np.ones(d)}],
                   options={"ftol": 1e-15, "maxiter": 1000})
    return float(res.fun)


def sequential_bound(nu, total_mean_photons: float) -> float:
    """Best total-variance on nu . phi from phases estimated one at a time
    with coherent probes (single-phase QFI equal to the mean photon number)."""
    if total_mean_photons <= 0:
        raise ValueError("mean photon number must be positive")
    nu = np.asarray(nu, dtype=float)
    closed = float(np.sum(np.abs(nu)) ** 2 / total_mean_photons)
    numeric = sequential_bound_numeric(nu, total_mean_photons)
    if abs(numeric - closed) > 1e-6 * max(1.0, closed):
        raise ArithmeticError(f"closed form {closed} disagrees with optimizer {numeric}")
    return closed


def _single_photon_trace(p: float, d: int) -> float:
    # gamma|ref> + delta sum_i |e_i> with |delta|^2 = p on each probed mode
    amps = np.sqrt(np.concatenate([[1.0 - d * p], np.full(d, p)]))
    basis = enumerate_basis(d + 1, 1)
    state = PureState(basis, amps[::-1].astype(complex))
    Q = qfi_pure(state, generators=list(range(d)))
    return trace_inverse(Q)


def optimal_single_photon_bound(d: int, n_probes: int = 1) -> float:
    """QCRB of the best single-photon probe over ``d`` phases, shared over probes."""
    if d < 1:
        raise ValueError("need at least one phase")
    res = minimize_scalar(lambda p: _single_photon_trace(p, d), bounds=(1e-9, 1.0 / d - 1e-9),
                          method="bounded", options={"xatol": 1e-12})
    numeric = float(res.fun) / n_probes
    closed = d * (1 + math.sqrt(d)) ** 2 / (4 * n_probes)
    if abs(numeric - closed) > 1e-6 * closed:
        raise ArithmeticError(f"closed form {closed} disagrees with optimizer {numeric}")
    return numeric


def ideal_combination() -> CombinationBound:
    """Optimal combination for the ideal two-photon probe."""
    return optimal_combination(qfi_pure(probe_state(DeviceModel.ideal())))
