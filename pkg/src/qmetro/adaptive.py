"""Adaptive estimation loop and multi-run campaigns.

Before every probe the control phases are chosen to minimize the expected
posterior covariance trace after the next outcome; the probe outcome is then
sampled from the device at the true phases and folded into the particle
posterior.
"""

from __future__ import annotations

import csv
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .device import TWO_PI, DeviceModel, DeviceLikelihood, phases_to_powers, powers_to_phases
from .estimation_theory import ideal_combination
from .smc import (
    ParticleCloud,
    PosteriorSummary,
    bayes_update,
    effective_sample_size,
    init_prior,
    resample,
    summarize,
)


@dataclass
class EstimationConfig:
    n_particles: int = 2000
    prior_width: float = np.pi
    prior_center: tuple[float, float, float] = (np.pi / 2, np.pi / 2, np.pi / 2)
    resample_threshold: float = 0.5
    liu_west_a: float = 0.98
    n_candidates: int = 30
    adaptive: bool = True
    control_span: float = np.pi
    truth_inset: float = np.pi / 10
    through_heaters: bool = False

    def to_dict(self) -> dict:
        d = asdict(self)
        d["prior_center"] = list(self.prior_center)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "EstimationConfig":
        data = dict(data)
        if "prior_center" in data:
            data["prior_center"] = tuple(float(x) for x in data["prior_center"])
        return cls(**data)


@dataclass
class StepRecord:
    control: np.ndarray
    outcome: int
    mean: np.ndarray
    trace_cov: float
    quad_loss: float
    comb_loss: float
    powers: np.ndarray | None = None


@dataclass
class EstimationTrajectory:
    truth: np.ndarray
    prior: PosteriorSummary
    prior_comb_loss: float
    records: list[StepRecord] = field(default_factory=list)
    seed: object = None
    device_digest: str | None = None

    def losses(self) -> np.ndarray:
        """Quadratic loss after 0, 1, ..., M probes."""
        return np.array([self.prior.quadratic_loss] + [r.quad_loss for r in self.records])

    def comb_losses(self) -> np.ndarray:
        return np.array([self.prior_comb_loss] + [r.comb_loss for r in self.records])

    def trace_covs(self) -> np.ndarray:
        return np.array([self.prior.trace_cov] + [r.trace_cov for r in self.records])


def expected_variance(cloud: ParticleCloud, control, likelihood) -> float:
    """Outcome-averaged trace of the posterior covariance after one more probe.

    Uses sum_d p_d Tr Sigma_d = sum_i w_i |x_i - mu|^2 - sum_d |S1_d|^2 / p_d,
    with ``p_d`` the predictive outcome probability and ``S1_d`` the first
    moment of the reweighted cloud about the current mean ``mu``.
    """
    w = cloud.weights
    x = cloud.positions
    center = w @ x
    sq = np.sum((x - center) ** 2, axis=1)
    control = np.asarray(control, dtype=float)
    if hasattr(likelihood, "outcome_moments"):
        # normalized likelihood: the second moments sum to the current spread
        p, s1 = likelihood.outcome_moments(x, w, control, center)
        spread = float(w @ sq)
    else:
        wl = likelihood(x, control) * w[:, None]
        p = wl.sum(axis=0)
        s1 = wl.T @ (x - center)
        spread = float(np.sum(wl.T @ sq))
    if not p.sum() > 0:
        raise FloatingPointError("predictive outcome distribution is degenerate")
    keep = p > 0
    value = spread - np.sum(np.sum(s1[keep] ** 2, axis=1) / p[keep])
    return float(max(value, 0.0))


def choose_control(cloud: ParticleCloud, likelihood, n_candidates: int = 30,
                   rng: np.random.Generator | None = None, previous=None,
                   span: float = np.pi):
    """Best of the zero control, the previous winner and random candidates.

    Random candidates are uniform in ``[0, span)^3``. On an imperfect device
    only the 2 pi period is exact, so ``span=2*np.pi`` covers every control;
    the default pi matched it in campaign tests.

    Returns ``(control, expected_variance)``; ties go to the first candidate
    evaluated.
    """
    candidates = [np.zeros(3)]
    if previous is not None:
        candidates.append(np.asarray(previous, dtype=float))
    if n_candidates > 0:
        rng = rng if rng is not None else np.random.default_rng()
        candidates.extend(rng.uniform(0.0, span, size=(n_candidates, 3)))
    best, best_value = candidates[0], np.inf
    for c in candidates:
        v = expected_variance(cloud, c, likelihood)
        if v < best_value:
            best, best_value = c, v
    return np.array(best, dtype=float), best_value


def sample_outcome(probs, rng: np.random.Generator) -> int:
    cdf = np.cumsum(probs)
    u = rng.random() * cdf[-1]
    return int(min(np.searchsorted(cdf, u, side="right"), len(cdf) - 1))


def _as_likelihood(device) -> DeviceLikelihood:
    if isinstance(device, DeviceModel):
        return DeviceLikelihood(device)
    return device


def _check_truth(truth: np.ndarray, config: EstimationConfig) -> None:
    offset = np.abs(truth - np.asarray(config.prior_center))
    if np.any(offset >= config.prior_width / 2):
        raise ValueError("true phases lie outside the prior support")


def run_estimation(device, truth, M: int, config: EstimationConfig | None = None,
                   seed=0, nu=None) -> EstimationTrajectory:
    """Estimate ``truth`` with ``M`` adaptively controlled probes."""
    config = config or EstimationConfig()
    lik = _as_likelihood(device)
    truth = np.asarray(truth, dtype=float)
    _check_truth(truth, config)
    nu = ideal_combination().nu if nu is None else np.asarray(nu, dtype=float)
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    prior_ss, outcome_ss, control_ss = ss.spawn(3)
    outcome_rng = np.random.default_rng(outcome_ss)
    control_rng = np.random.default_rng(control_ss)
    thermal = lik.model.thermal if config.through_heaters else None

    cloud = init_prior(config.prior_center, config.prior_width, config.n_particles,
                       np.random.default_rng(prior_ss))
    prior = summarize(cloud, truth)
    traj = EstimationTrajectory(
        truth=truth, prior=prior,
        prior_comb_loss=float((nu @ (prior.mean - truth)) ** 2),
        seed=getattr(ss, "entropy", seed),
        device_digest=lik.model.digest() if hasattr(lik, "model") else None,
    )
    previous = None
    for _ in range(M):
        if config.adaptive:
            control, _ = choose_control(cloud, lik, config.n_candidates, control_rng,
                                        previous, config.control_span)
            previous = control
        else:
            control = np.zeros(3)
        powers = None
        if thermal is not None:
            powers = phases_to_powers(thermal, control)
            control = powers_to_phases(thermal, powers)
        outcome = sample_outcome(lik(truth[None, :], control)[0], outcome_rng)
        cloud = bayes_update(cloud, outcome, lik, control)
        if effective_sample_size(cloud) < config.resample_threshold * len(cloud):
            cloud = resample(cloud, config.liu_west_a)
        s = summarize(cloud, truth)
        traj.records.append(StepRecord(
            control=control, outcome=outcome, mean=s.mean, trace_cov=s.trace_cov,
            quad_loss=s.quadratic_loss, comb_loss=float((nu @ (s.mean - truth)) ** 2),
            powers=powers,
        ))
    return traj


@dataclass
class CampaignResult:
    triplets: np.ndarray
    repetitions: int
    M: int
    losses: np.ndarray  # (triplet, repetition, M + 1)
    comb_losses: np.ndarray
    trace_covs: np.ndarray
    seed: int = 0

    def _flat(self, a: np.ndarray) -> np.ndarray:
        return a.reshape(-1, self.M + 1)

    @property
    def n_runs(self) -> int:
        return len(self.triplets) * self.repetitions

    def mean_loss(self) -> np.ndarray:
        return self._flat(self.losses).mean(axis=0)

    def std_loss(self) -> np.ndarray:
        return self._flat(self.losses).std(axis=0)

    def mean_comb_loss(self) -> np.ndarray:
        return self._flat(self.comb_losses).mean(axis=0)

    def std_comb_loss(self) -> np.ndarray:
        return self._flat(self.comb_losses).std(axis=0)

    def mean_trace_cov(self) -> np.ndarray:
        return self._flat(self.trace_covs).mean(axis=0)

    def per_triplet_mean_loss(self) -> np.ndarray:
        return self.losses.mean(axis=1)

    def write_trajectories_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["triplet_id", "repetition", "M", "trace_cov", "quad_loss", "comb_loss"])
            for t in range(len(self.triplets)):
                for r in range(self.repetitions):
                    for m in range(self.M + 1):
                        writer.writerow([t, r, m, repr(float(self.trace_covs[t, r, m])),
                                         repr(float(self.losses[t, r, m])),
                                         repr(float(self.comb_losses[t, r, m]))])

    def write_aggregate_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["M", "mean_quad_loss", "std_quad_loss", "M_mean_quad_loss",
                             "mean_comb_loss", "std_comb_loss", "M_mean_comb_loss",
                             "mean_trace_cov"])
            if self.n_runs == 0:
                return
            cols = (self.mean_loss(), self.std_loss(), self.mean_comb_loss(),
                    self.std_comb_loss(), self.mean_trace_cov())
            for m in range(self.M + 1):
                ml, sl, mc, sc, tc = (float(c[m]) for c in cols)
                writer.writerow([m, repr(ml), repr(sl), repr(m * ml), repr(mc), repr(sc),
                                 repr(m * mc), repr(tc)])


def draw_triplets(n_triplets: int, config: EstimationConfig, seed) -> np.ndarray:
    rng = np.random.default_rng(seed)
    half = config.prior_width / 2 - config.truth_inset
    return np.asarray(config.prior_center) + rng.uniform(-half, half, size=(n_triplets, 3))


def _campaign_job(args):
    lik, truth, M, config, seed, nu = args
    traj = run_estimation(lik, truth, M, config, seed, nu)
    return traj.losses(), traj.comb_losses(), traj.trace_covs()


def default_workers() -> int:
    env = os.environ.get("QMETRO_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def run_campaign(device, n_triplets: int = 12, repetitions: int = 30, M: int = 100,
                 config: EstimationConfig | None = None, seed: int = 0,
                 workers: int | None = 1, triplets=None) -> CampaignResult:
    """Repeat adaptive estimations over several true phase triplets.

    Every run gets its own seed stream spawned from ``seed`` in
    (triplet, repetition) order, so results do not depend on ``workers``.
    """
    config = config or EstimationConfig()
    lik = _as_likelihood(device)
    truth_ss, run_ss = np.random.SeedSequence(seed).spawn(2)
    if triplets is None:
        triplets = draw_triplets(n_triplets, config, truth_ss)
    triplets = np.asarray(triplets, dtype=float).reshape(-1, 3)
    n_triplets = len(triplets)
    run_seeds = run_ss.spawn(n_triplets * repetitions)
    nu = ideal_combination().nu
    jobs = [(lik, triplets[t], M, config, run_seeds[t * repetitions + r], nu)
            for t in range(n_triplets) for r in range(repetitions)]
    workers = default_workers() if workers is None else workers
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_campaign_job, jobs, chunksize=1))
    else:
        results = [_campaign_job(j) for j in jobs]
    shape = (n_triplets, repetitions, M + 1)
    losses = np.zeros(shape)
    combs = np.zeros(shape)
    traces = np.zeros(shape)
    for k, (l, c, t) in enumerate(results):
        i, j = divmod(k, repetitions)
        losses[i, j], combs[i, j], traces[i, j] = l, c, t
    return CampaignResult(triplets=triplets, repetitions=repetitions, M=M, losses=losses,
                          comb_losses=combs, trace_covs=traces, seed=seed)


def campaign_manifest(result: CampaignResult, config: EstimationConfig, device_digest: str,
                      extra: dict | None = None) -> dict:
    manifest = {
        "seed": result.seed,
        "n_triplets": int(len(result.triplets)),
        "repetitions": result.repetitions,
        "M": result.M,
        "estimation": config.to_dict(),
        "device_sha256": device_digest,
        "triplets": result.triplets.tolist(),
    }
    if extra:
        manifest.update(extra)
    return manifest


def write_manifest(path, manifest: dict) -> None:
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
