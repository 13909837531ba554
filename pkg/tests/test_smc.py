import numpy as np
import pytest

from qmetro.device import DeviceLikelihood, DeviceModel
from qmetro.smc import (
    ParticleCloud,
    WeightUnderflowError,
    bayes_update,
    effective_sample_size,
    init_prior,
    resample,
    summarize,
    weighted_moments,
)


def gaussian_likelihood(positions, control):
    """Two-outcome toy model: outcome 0 is likely near the origin."""
    r2 = np.sum((positions - control) ** 2, axis=1)
    p0 = np.exp(-r2)
    return np.column_stack([p0, 1.0 - p0])


class TestPrior:
    def test_uniform_support(self):
        cloud = init_prior([1.0, 2.0, 3.0], np.pi, 500, seed=0)
        assert cloud.positions.shape == (500, 3)
        assert np.all(np.abs(cloud.positions - [1.0, 2.0, 3.0]) <= np.pi / 2)
        assert cloud.weights.sum() == pytest.approx(1.0)

    def test_uniform_variance(self):
        cloud = init_prior([0.0, 0.0, 0.0], np.pi, 20000, seed=1)
        s = summarize(cloud)
        assert s.trace_cov == pytest.approx(3 * np.pi ** 2 / 12, rel=0.03)

    def test_minimum_size(self):
        with pytest.raises(ValueError):
            init_prior([0, 0, 0], n_particles=10)

    def test_seeded(self):
        a = init_prior([0, 0, 0], seed=5)
        b = init_prior([0, 0, 0], seed=5)
        np.testing.assert_array_equal(a.positions, b.positions)


class TestUpdate:
    def test_bayes_rule(self):
        pos = np.array([[0.0, 0, 0], [1.0, 0, 0], [2.0, 0, 0]])
        cloud = ParticleCloud(pos, np.full(3, 1 / 3), np.random.default_rng(0))
        new = bayes_update(cloud, 0, gaussian_likelihood, np.zeros(3))
        expected = np.exp(-np.array([0.0, 1.0, 4.0]))
        np.testing.assert_allclose(new.weights, expected / expected.sum())

    def test_underflow(self):
        pos = np.full((4, 3), 100.0)
        cloud = ParticleCloud(pos, np.full(4, 0.25), np.random.default_rng(0))
        with pytest.raises(WeightUnderflowError):
            bayes_update(cloud, 0, gaussian_likelihood, np.zeros(3))

    def test_ess(self):
        cloud = ParticleCloud(np.zeros((4, 3)), np.array([1.0, 0, 0, 0]), None)
        assert effective_sample_size(cloud) == pytest.approx(1.0)
        cloud.weights = np.full(4, 0.25)
        assert effective_sample_size(cloud) == pytest.approx(4.0)

    def test_posterior_concentrates(self):
        lik = DeviceLikelihood(DeviceModel.ideal())
        truth = np.array([1.3, 1.9, 1.0])
        rng = np.random.default_rng(4)
        cloud = init_prior([np.pi / 2] * 3, seed=rng)
        start = summarize(cloud).trace_cov
        for k in range(60):
            c = rng.uniform(0, 2 * np.pi, 3)
            p = lik.single(truth, c)
            cloud = bayes_update(cloud, rng.choice(10, p=p), lik, c)
            if effective_sample_size(cloud) < 0.5 * len(cloud):
                cloud = resample(cloud)
        assert summarize(cloud).trace_cov < 0.1 * start


class TestResample:
    def test_moments_preserved(self):
        rng = np.random.default_rng(2)
        pos = rng.normal(size=(20000, 3)) @ np.array([[1, 0, 0], [0.5, 1, 0], [0, 0.2, 0.3]])
        w = rng.random(20000)
        w /= w.sum()
        cloud = ParticleCloud(pos, w, rng)
        mean, cov = weighted_moments(pos, w)
        new = resample(cloud, a=0.9)
        m2, c2 = weighted_moments(new.positions, new.weights)
        np.testing.assert_allclose(m2, mean, atol=0.03)
        np.testing.assert_allclose(c2, cov, atol=0.05)
        np.testing.assert_allclose(new.weights, 1 / 20000)

    def test_degenerate_cloud(self):
        # a collapsed cloud still resamples thanks to the jitter floor
        cloud = ParticleCloud(np.ones((200, 3)), np.full(200, 1 / 200), np.random.default_rng(0))
        new = resample(cloud)
        assert np.all(np.isfinite(new.positions))

    def test_deterministic(self):
        def run():
            cloud = init_prior([0, 0, 0], n_particles=300, seed=7)
            cloud.weights = np.linspace(1, 2, 300) / np.linspace(1, 2, 300).sum()
            return resample(cloud).positions

        np.testing.assert_array_equal(run(), run())


class TestSerialization:
    def test_json_roundtrip(self):
        cloud = init_prior([0, 1, 2], n_particles=100, seed=0)
        again = ParticleCloud.from_json(cloud.to_json())
        np.testing.assert_array_equal(again.positions, cloud.positions)
        np.testing.assert_array_equal(again.weights, cloud.weights)

    def test_summary_loss(self):
        cloud = ParticleCloud(np.array([[1.0, 1, 1], [3.0, 1, 1]]), np.array([0.5, 0.5]), None)
        s = summarize(cloud, truth=[2.0, 1.0, 0.0])
        np.testing.assert_allclose(s.mean, [2.0, 1.0, 1.0])
        assert s.quadratic_loss == pytest.approx(1.0)
        assert s.trace_cov == pytest.approx(1.0)
