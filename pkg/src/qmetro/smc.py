"""Sequential Monte Carlo posterior over the three unknown phases.

A likelihood here is any callable ``likelihood(positions, control)`` returning
an ``(n_particles, n_outcomes)`` array of outcome probabilities.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

JITTER_FLOOR = 1e-10


class WeightUnderflowError(FloatingPointError):
    """Every particle was assigned zero posterior weight."""


@dataclass
class ParticleCloud:
    positions: np.ndarray
    weights: np.ndarray
    rng: np.random.Generator

    def __len__(self) -> int:
        return len(self.weights)

    def to_json(self) -> str:
        return json.dumps({
            "positions": self.positions.tolist(),
            "weights": self.weights.tolist(),
        })

    @classmethod
    def from_json(cls, text: str, seed=None) -> "ParticleCloud":
        data = json.loads(text)
        return cls(np.array(data["positions"], dtype=float),
                   np.array(data["weights"], dtype=float),
                   np.random.default_rng(seed))


@dataclass
class PosteriorSummary:
    mean: np.ndarray
    covariance: np.ndarray
    trace_cov: float
    quadratic_loss: float | None = None


def init_prior(center, width: float = np.pi, n_particles: int = 2000,
               seed=None) -> ParticleCloud:
    """Uniform prior on the cube ``center +/- width / 2``."""
    if n_particles < 100:
        raise ValueError("use at least 100 particles")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    center = np.asarray(center, dtype=float)
    positions = center + rng.uniform(-width / 2, width / 2, size=(n_particles, len(center)))
    weights = np.full(n_particles, 1.0 / n_particles)
    return ParticleCloud(positions, weights, rng)


def bayes_update(cloud: ParticleCloud, outcome: int, likelihood, control) -> ParticleCloud:
    like = likelihood(cloud.positions, control)[:, outcome]
    w = cloud.weights * like
    total = w.sum()
    if not total > 0 or not np.isfinite(total):
        raise WeightUnderflowError(f"outcome {outcome} has zero likelihood on every particle")
    return ParticleCloud(cloud.positions, w / total, cloud.rng)


def effective_sample_size(cloud: ParticleCloud) -> float:
    return float(1.0 / np.sum(cloud.weights ** 2))


def weighted_moments(positions: np.ndarray, weights: np.ndarray):
    mean = weights @ positions
    centered = positions - mean
    cov = (centered * weights[:, None]).T @ centered
    return mean, 0.5 * (cov + cov.T)


def resample(cloud: ParticleCloud, a: float = 0.98) -> ParticleCloud:
    """Liu-West resampling.

    Particles are drawn by weight, contracted toward the posterior mean by
    ``a`` and jittered with covariance ``(1 - a^2) Sigma`` so that the first
    two moments are preserved.
    """
    n = len(cloud)
    rng = cloud.rng
    mean, cov = weighted_moments(cloud.positions, cloud.weights)
    idx = rng.choice(n, size=n, p=cloud.weights)
    jitter_cov = (1.0 - a * a) * cov + JITTER_FLOOR * np.eye(len(mean))
    chol = np.linalg.cholesky(jitter_cov)
    noise = rng.standard_normal((n, len(mean))) @ chol.T
    positions = a * cloud.positions[idx] + (1.0 - a) * mean + noise
    return ParticleCloud(positions, np.full(n, 1.0 / n), rng)


def summarize(cloud: ParticleCloud, truth=None) -> PosteriorSummary:
    mean, cov = weighted_moments(cloud.positions, cloud.weights)
    loss = None
    if truth is not None:
        loss = float(np.sum((mean - np.asarray(truth, dtype=float)) ** 2))
    return PosteriorSummary(mean=mean, covariance=cov, trace_cov=float(np.trace(cov)),
                            quadratic_loss=loss)
