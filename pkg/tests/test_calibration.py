import warnings

import numpy as np
import pytest

from qmetro.calibration import (
    CharacterizationDataset,
    FitSpec,
    LowStatisticsWarning,
    ParameterMap,
    fit_model,
    fit_report,
    generate_characterization,
    negative_log_likelihood,
    perturb_model,
    power_levels,
    setting_probabilities,
    split_holdout,
    sweep_settings,
)
from qmetro.device import DeviceModel


@pytest.fixture(scope="module")
def truth():
    return DeviceModel.perturbed()


@pytest.fixture(scope="module")
def data(truth):
    return generate_characterization(truth, 10 ** 5, seed=1)


class TestGeneration:
    def test_levels(self):
        levels = power_levels()
        assert len(levels) == 10
        assert levels[0] == 0.0 and levels[-1] == 30.0
        assert np.allclose(np.diff(levels), 30.0 / 9)

    def test_sweeps_cover_pairs(self):
        s = sweep_settings(power_levels())
        nonzero = (s > 0).sum(axis=1)
        assert nonzero.max() == 2
        assert np.all(s <= 30.0)
        single = sweep_settings(power_levels(), heaters=(1,), pairwise=False)
        assert np.all(single[:, [0, 2]] == 0)

    def test_counts_sum_to_shots(self, data):
        assert np.all(data.counts.sum(axis=1) == 10 ** 5)
        assert data.swept_heaters() == (0, 1, 2)

    def test_one_shot_is_one_hot(self, truth):
        d = generate_characterization(truth, 1, seed=0)
        assert np.all(d.counts.sum(axis=1) == 1)
        assert set(np.unique(d.counts)) <= {0, 1}

    def test_frequencies_within_five_sigma(self, truth):
        shots = 10 ** 6
        d = generate_characterization(truth, shots, seed=2)
        p = setting_probabilities(truth, d.settings)
        sigma = np.sqrt(p * (1 - p) / shots)
        assert np.all(np.abs(d.counts / shots - p) <= 5 * sigma + 1e-12)

    def test_rejects_zero_shots(self, truth):
        with pytest.raises(ValueError):
            generate_characterization(truth, 0)

    def test_rejects_over_limit(self, truth):
        with pytest.raises(ValueError):
            generate_characterization(truth, 10, levels=[0.0, 40.0])

    def test_csv_roundtrip(self, data, tmp_path):
        data.to_csv(tmp_path / "d.csv")
        again = CharacterizationDataset.from_csv(tmp_path / "d.csv")
        np.testing.assert_array_equal(again.settings, data.settings)
        np.testing.assert_array_equal(again.counts, data.counts)
        assert again.shots == data.shots

    def test_invariant_violation(self):
        with pytest.raises(ValueError):
            CharacterizationDataset(np.zeros((1, 3)), np.ones((1, 10)), shots=3)


class TestParameterMap:
    def test_roundtrip(self, truth):
        pmap = ParameterMap(truth)
        rebuilt = pmap.to_model(pmap.x0)
        np.testing.assert_allclose(rebuilt.thermal.alpha, truth.thermal.alpha)
        np.testing.assert_allclose(rebuilt.efficiencies, truth.efficiencies / truth.efficiencies.max())
        assert rebuilt.visibility == truth.visibility

    def test_spec_subsets(self, truth):
        assert len(ParameterMap(truth)) == 3 + 9 + 3 + 8 + 1 + 9
        assert len(ParameterMap(truth, FitSpec(efficiencies=False, reflectivities=False))) == 16


class TestFit:
    def test_initial_truth_stays_at_floor(self, truth, data):
        floor = negative_log_likelihood(truth, data)
        fit = fit_model(data, truth, n_starts=1, probe_curvature=False)
        assert fit.objective <= floor
        # the floor is reached up to sampling noise of the fitted parameters
        assert floor - fit.objective < 0.5 * len(fit.parameters)

    def test_recovery_and_holdout(self, truth, data):
        train, hold = split_holdout(data, 0.2, seed=0)
        initial = perturb_model(truth, rel=0.1, seed=2)
        fit = fit_model(train, initial, n_starts=1, probe_curvature=False)
        diag = np.diag(fit.model.thermal.alpha) / np.diag(truth.thermal.alpha) - 1
        assert np.max(np.abs(diag)) < 0.02
        assert abs(fit.model.visibility - truth.visibility) < 0.01
        assert fit.converged
        report = fit_report(fit.model, hold)
        assert report.reduced_chi2 == pytest.approx(1.0, abs=0.3)
        kept = [r["pearson_residual"] for r in report.residuals if r["expected"] >= 5]
        assert np.max(np.abs(kept)) < 5

    def test_single_heater_flags_unswept(self, truth):
        d = generate_characterization(truth, 10 ** 4, seed=3, heaters=(0,), pairwise=False)
        spec = FitSpec(reflectivities=False, efficiencies=False)
        fit = fit_model(d, truth, spec, n_starts=1)
        for name in ("alpha_ab", "alpha_bb", "alpha_db", "alpha_ad", "alpha_bd", "alpha_dd",
                     "alpha2_b", "alpha2_d"):
            assert name in fit.non_identifiable
        for name in ("alpha_aa", "alpha_ba", "alpha_da", "visibility"):
            assert name not in fit.non_identifiable

    def test_unused_input_coupler_is_flagged(self, truth):
        # the probe never populates modes (0, 1) before the first coupler layer
        d = generate_characterization(truth, 10 ** 4, seed=4)
        spec = FitSpec(phi0=False, alpha=False, alpha2=False, efficiencies=False)
        fit = fit_model(d, truth, spec, n_starts=1)
        assert fit.non_identifiable == ["refl_0"]

    def test_budget_exhaustion_is_flagged(self, truth, data):
        fit = fit_model(data, perturb_model(truth, seed=5), n_starts=1, max_evaluations=50,
                        probe_curvature=False)
        assert fit.flagged

    def test_low_shots_warns(self, truth):
        d = generate_characterization(truth, 10, seed=0)
        with pytest.warns(LowStatisticsWarning):
            fit_model(d, truth, FitSpec(reflectivities=False, efficiencies=False), n_starts=1,
                      max_evaluations=200, probe_curvature=False)

    def test_empty(self, truth):
        empty = CharacterizationDataset(np.zeros((0, 3)), np.zeros((0, 10)), 100)
        with pytest.raises(ValueError):
            fit_model(empty, truth)


class TestReport:
    def test_truth_gives_unit_reduced_chi2(self, truth, data):
        report = fit_report(truth, data)
        # chi-square with ~700 dof: sd of the reduced value is about 0.05
        assert report.reduced_chi2 == pytest.approx(1.0, abs=0.2)
        assert len(report.residuals) == 10 * len(data)

    def test_mismatched_model(self, data):
        assert fit_report(DeviceModel.ideal(), data).reduced_chi2 > 100

    def test_empty(self, truth):
        empty = CharacterizationDataset(np.zeros((0, 3)), np.zeros((0, 10)), 100)
        report = fit_report(truth, empty)
        assert report.residuals == [] and report.total_dof == 0

    def test_holdout_split(self, data):
        train, hold = split_holdout(data, 0.25, seed=0)
        assert len(train) + len(hold) == len(data)
        assert len(hold) == round(0.25 * len(data))

    def test_residual_csv(self, truth, data, tmp_path):
        fit_report(truth, data.subset(slice(0, 3))).write_residuals_csv(tmp_path / "r.csv")
        lines = (tmp_path / "r.csv").read_text().splitlines()
        assert lines[0].startswith("setting,power_a")
        assert len(lines) == 31

    def test_low_statistics_flag(self, truth):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            d = generate_characterization(truth, 10, seed=0)
        assert fit_report(truth, d).low_statistics
