import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qmetro.device import TWO_PI, UNKNOWN_MODES, DeviceLikelihood, DeviceModel, probe_state
from qmetro.estimation_theory import (
    DIVERGENCE,
    density_from_traces,
    fi_batch,
    fi_matrix,
    fi_matrix_analytic,
    fisher_report,
    ideal_combination,
    linear_combination_bound,
    optimal_combination,
    optimal_single_photon_bound,
    qfi_pure,
    resolve_mode,
    scan_slice,
    sequential_bound,
    sequential_bound_numeric,
    threshold_density,
    trace_fi_inv,
    trace_inverse,
    trace_inverse_batch,
)
from qmetro.linear_optics import PureState

QFI_IDEAL = np.array([[2.0, 0.0, -1.0], [0.0, 2.0, -1.0], [-1.0, -1.0, 2.0]])


def qfi_overlap_oracle(probe: PureState, h: float = 1e-6) -> np.ndarray:
    """4 Re[<d_i psi|d_j psi> - <d_i psi|psi><psi|d_j psi>] with numerical derivatives."""
    occ = probe.occupation_matrix()

    def shifted(k, step):
        return probe.amplitudes * np.exp(1j * step * occ[:, UNKNOWN_MODES[k]])

    psi = probe.amplitudes
    d = [(shifted(k, h) - shifted(k, -h)) / (2 * h) for k in range(3)]
    Q = np.empty((3, 3))
    for i in range(3):
        for j in range(3):
            Q[i, j] = 4 * (np.vdot(d[i], d[j]) - np.vdot(d[i], psi) * np.vdot(psi, d[j])).real
    return Q


class TestQFI:
    def test_ideal_probe(self, ideal):
        Q = qfi_pure(probe_state(ideal))
        np.testing.assert_allclose(Q, QFI_IDEAL, atol=1e-12)
        assert trace_inverse(Q) == pytest.approx(2.5, abs=1e-12)

    def test_matches_overlap_oracle(self, perturbed):
        probe = probe_state(perturbed)
        np.testing.assert_allclose(qfi_pure(probe), qfi_overlap_oracle(probe), atol=1e-6)

    def test_quarter_phases_do_not_matter(self):
        from qmetro.device import QuarterParams

        model = DeviceModel(quarter_in=QuarterParams(phase_hi=1.1, phase_lo=-0.4))
        np.testing.assert_allclose(qfi_pure(probe_state(model)), QFI_IDEAL, atol=1e-12)

    @settings(max_examples=20, deadline=None)
    @given(st.floats(0, TWO_PI), st.floats(0, TWO_PI), st.floats(0, TWO_PI))
    def test_classical_below_quantum(self, a, b, d):
        F = fi_matrix_analytic(DeviceModel.ideal(), [a, b, d])
        assert np.linalg.eigvalsh(QFI_IDEAL - F)[0] >= -1e-9


class TestFisher:
    @pytest.mark.parametrize("mode", ["indistinguishable", "distinguishable", 0.7])
    def test_finite_difference_vs_analytic(self, perturbed, mode):
        model = resolve_mode(perturbed, mode)
        lik = DeviceLikelihood(model)
        for x in np.random.default_rng(3).uniform(0, TWO_PI, size=(4, 3)):
            F_fd = fi_matrix(lik.single, x)
            F_an = fi_matrix_analytic(model, x)
            np.testing.assert_allclose(F_fd, F_an, rtol=1e-5, atol=1e-8)

    def test_batch_matches_single(self, perturbed):
        lik = DeviceLikelihood(perturbed)
        X = np.random.default_rng(0).uniform(0, TWO_PI, size=(5, 3))
        batch = fi_batch(lik, X)
        for x, F in zip(X, batch):
            np.testing.assert_allclose(F, fi_matrix(lik.single, x), rtol=1e-10, atol=1e-12)

    def test_singular_gives_inf(self):
        assert trace_inverse(np.diag([1.0, 1.0, 0.0])) == math.inf
        out = trace_inverse_batch(np.stack([np.eye(3), np.diag([1.0, 0.0, 1.0])]))
        assert out[0] == pytest.approx(3.0) and out[1] == math.inf

    def test_resolve_mode(self, perturbed):
        assert resolve_mode(perturbed, "device") is perturbed
        assert resolve_mode(perturbed, "distinguishable").visibility == 0.0
        assert resolve_mode(perturbed, 0.3).visibility == 0.3
        with pytest.raises(ValueError):
            resolve_mode(perturbed, "quantum")

    def test_report(self, ideal):
        x = [0.3, 1.2, 2.0]
        r = fisher_report(ideal, x, mode="indistinguishable")
        assert r.qcrb_trace == pytest.approx(2.5)
        assert r.fi_inv_trace == pytest.approx(trace_fi_inv(ideal, x, "indistinguishable")[0],
                                               rel=1e-8)
        assert r.fi_inv_trace >= 2.5

    def test_crb_above_qcrb_on_random_triples(self, ideal):
        X = np.random.default_rng(9).uniform(0, TWO_PI, size=(2000, 3))
        assert np.min(trace_fi_inv(ideal, X, "indistinguishable")) >= 2.5 - 1e-6


class TestScans:
    def test_slice_shape(self, ideal):
        rows = scan_slice(ideal, "indistinguishable", "D", 0.0, grid_points=20)
        assert rows.shape == (400, 4)
        assert np.all(rows[:, 2] == 0.0)

    def test_density_bounds(self, ideal):
        d = threshold_density(ideal, "indistinguishable", 2.5 - 1e-6)
        assert d.density == 0.0
        d = threshold_density(ideal, "indistinguishable", DIVERGENCE)
        assert d.density == 1.0 - d.divergence_fraction
        with pytest.raises(ValueError):
            threshold_density(ideal, "indistinguishable", 3.0, n_samples=100)

    def test_density_stderr(self):
        d = density_from_traces(np.array([1.0, 3.0, 3.0, 3.0]), 2.0)
        assert d.density == 0.25
        assert d.stderr == pytest.approx(math.sqrt(0.25 * 0.75 / 4))


class TestComparisonBounds:
    def test_optimal_combination(self):
        c = optimal_combination(QFI_IDEAL)
        np.testing.assert_allclose(c.nu, [0.5, 0.5, -1 / math.sqrt(2)], atol=1e-12)
        assert c.value == pytest.approx(1 - 1 / math.sqrt(2), abs=1e-12)
        assert linear_combination_bound(QFI_IDEAL, c.nu) == pytest.approx(c.value)

    def test_ideal_combination(self):
        assert ideal_combination().value == pytest.approx(0.29289, abs=1e-5)

    def test_singular_combination(self):
        with pytest.raises(np.linalg.LinAlgError):
            linear_combination_bound(np.zeros((3, 3)), [1, 0, 0])

    def test_sequential(self):
        nu = ideal_combination().nu
        assert sequential_bound(nu, 2) == pytest.approx((1 + 1 / math.sqrt(2)) ** 2 / 2)
        assert sequential_bound_numeric(nu, 2) == pytest.approx(1.4571, abs=1e-4)
        with pytest.raises(ValueError):
            sequential_bound(nu, 0)

    @pytest.mark.parametrize("d,n,expected", [(1, 1, 1.0), (3, 2, 2.799038), (2, 1, 2.914214)])
    def test_single_photon(self, d, n, expected):
        assert optimal_single_photon_bound(d, n) == pytest.approx(expected, abs=1e-6)

    def test_single_photon_rejects_zero(self):
        with pytest.raises(ValueError):
            optimal_single_photon_bound(0)
