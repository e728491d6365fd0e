import unittest
from dataclasses import replace

import numpy as np
from numpy.testing import assert_allclose, assert_array_equal

from semifmm.basis import WaveletSpec, build_basis
from semifmm.design import assemble
from semifmm.errors import ValidationError
from semifmm.inference import StackedPosterior
from semifmm.runconfig import SimulationConfig
from semifmm.simulate import (
    DesignFrame,
    PseudoParameters,
    age_profile,
    inject_spikes,
    scenario_dataset,
    simulate_coefficients,
    simulate_from_fit,
    simulation_rng,
    study_design,
    truth_from_fit,
)

SMALL = SimulationConfig(n_subjects=4, n_units=6, serial_levels=(7.0, 15.0, 30.0, 45.0))


class TestStudyDesign(unittest.TestCase):
    def test_default_layout(self):
        records = study_design(simulation_rng(0))
        self.assertEqual(len(records), 34 * 9)
        self.assertEqual(len({r.subject_id for r in records}), 19)
        two_eyes = {r.subject_id for r in records if r.unit_id.endswith("OS")}
        self.assertEqual(len(two_eyes), 15)
        ages = {r.subject_id: r.covariates["age"] for r in records}
        self.assertTrue(all(r.covariates["age"] == ages[r.subject_id] for r in records))

    def test_impossible_layout(self):
        with self.assertRaises(ValidationError):
            study_design(simulation_rng(0), n_subjects=5, n_units=11)

    def test_age_profiles(self):
        ages = np.array([20.0, 55.0, 90.0])
        assert_allclose(age_profile("linear", ages), [-1.0, 0.0, 1.0])
        assert_allclose(age_profile("nonparametric", ages), [0.0, 0.0, 0.0], atol=1e-12)
        assert_allclose(age_profile("none", ages), 0.0)


class TestPseudoParameters(unittest.TestCase):
    def setUp(self):
        frame = DesignFrame(study_design(simulation_rng(1), n_subjects=4, n_units=6))
        self.bundle = assemble(frame, "value ~ lin(age) + (1 | eye)")

    def test_zero_variances_give_the_mean(self):
        params = PseudoParameters(fixed=np.array([[1.0, 2.0], [0.5, 0.0]]), vc=np.zeros((1, 2)), s=np.zeros(2))
        draws = simulate_coefficients(params, self.bundle, simulation_rng(2))
        assert_allclose(draws, self.bundle.X @ params.fixed)

    def test_missing_and_negative_values(self):
        cases = [
            PseudoParameters(fixed=np.ones((1, 2)), vc=np.ones((1, 2)), s=np.ones(2)),
            PseudoParameters(fixed=np.array([[1.0, np.nan], [1.0, 1.0]]), vc=np.ones((1, 2)), s=np.ones(2)),
            PseudoParameters(fixed=np.ones((2, 2)), vc=-np.ones((1, 2)), s=np.ones(2)),
            PseudoParameters(fixed=np.ones((2, 2)), vc=np.ones((1, 2)), s=np.ones(2), spline={"np(age)": np.ones((7, 2))}),
        ]
        for params in cases:
            with self.assertRaises(ValidationError):
                params.check(self.bundle)

    def test_same_seed_same_draws(self):
        params = PseudoParameters(fixed=np.ones((2, 3)), vc=np.ones((1, 3)), s=np.full(3, 0.1))
        first = simulate_coefficients(params, self.bundle, simulation_rng(5))
        second = simulate_coefficients(params, self.bundle, simulation_rng(5))
        assert_array_equal(first, second)


class TestScenarios(unittest.TestCase):
    def test_glaucoma_scenario(self):
        result = scenario_dataset(SMALL, seed=3)
        self.assertEqual(result.dataset.values.shape, (6 * 4, 32, 32))
        self.assertEqual(result.formula, "value ~ hyper(iop) + np(age) + (hyper(iop) | eye)")
        self.assertEqual(set(result.surfaces), {"intercept", "age", "G1", "G2"})
        again = scenario_dataset(SMALL, seed=3)
        assert_array_equal(again.dataset.values, result.dataset.values)

    def test_noise_free_null_scenario_is_the_intercept_surface(self):
        config = replace(SMALL, scenario="null", unit_sd=0.0, noise_sd=0.0)
        result = scenario_dataset(config, seed=4)
        for values in result.dataset.values:
            assert_allclose(values, result.surfaces["intercept"], atol=1e-10)

    def test_spikes(self):
        result = scenario_dataset(replace(SMALL, spike_units=2, spike_magnitude=1e4), seed=5)
        self.assertEqual(len(result.spiked), 2)
        first_rows = np.abs(result.dataset.values[result.spiked, 0, :]).max(axis=1)
        self.assertTrue(np.all(first_rows > 1e2))
        with self.assertRaises(ValidationError):
            inject_spikes(result.dataset, 100, 1.0, simulation_rng(0))


class TestPosteriorPredictive(unittest.TestCase):
    def setUp(self):
        self.result = scenario_dataset(replace(SMALL, scenario="linear_random"), seed=6)
        self.basis, _, _ = build_basis(self.result.dataset.values, WaveletSpec(), energy_threshold=0.99)
        self.bundle = assemble(self.result.dataset, "value ~ np(age) + (1 | eye)")
        rng = np.random.default_rng(0)
        G, K = 5, self.basis.K
        self.stacked = StackedPosterior(
            b=rng.normal(size=(G, K, self.bundle.n_fixed)),
            vc=rng.uniform(0.01, 0.02, size=(G, K, self.bundle.n_vc)),
            s=rng.uniform(0.01, 0.02, size=(G, K)),
            u={"np(age)": rng.normal(size=(G, K, self.bundle.spline_terms[0].kit.dr.n_random))},
            fixed_names=self.bundle.fixed_names,
            vc_names=self.bundle.vc_names,
        )

    def test_truth_is_one_kept_draw(self):
        truth = truth_from_fit(self.stacked, self.bundle, 2)
        assert_array_equal(truth.fixed, self.stacked.b[2].T)
        assert_array_equal(truth.s, self.stacked.s[2])
        assert_array_equal(truth.vc[1], self.stacked.vc[2, :, 1])
        self.assertEqual(truth.vc[0].max(), 0.0)
        assert_array_equal(truth.spline["np(age)"], self.stacked.u["np(age)"][2].T)
        with self.assertRaises(ValidationError):
            truth_from_fit(self.stacked, self.bundle, 5)

    def test_simulate_from_fit(self):
        ages = np.sort(self.result.dataset.covariate("age"))[[0, -1]]
        grid = self.result.dataset.grid
        predicted = simulate_from_fit(self.stacked, self.bundle, self.basis, ages, (7.0, 30.0), seed=1, grid=grid)
        self.assertEqual(predicted.n_functions, 4)
        self.assertEqual(predicted.values.shape[1:], grid.shape)
        self.assertEqual(predicted.records[0].function_id, "P01-OD-p7")
        again = simulate_from_fit(self.stacked, self.bundle, self.basis, ages, (7.0, 30.0), seed=1, grid=grid)
        assert_array_equal(again.values, predicted.values)

    def test_ages_outside_fit_are_clipped(self):
        low, high = self.bundle.covariate_range("age")
        middle = 0.5 * (low + high)
        with self.assertLogs("semifmm", level="WARNING") as logs:
            predicted = simulate_from_fit(self.stacked, self.bundle, self.basis, [low - 10.0, middle, high + 10.0],
                                          (7.0,), seed=3, grid=self.result.dataset.grid)
        self.assertTrue(any("Clipping 2 age(s)" in line for line in logs.output))
        self.assertEqual([r.covariates["age"] for r in predicted.records], [low, middle, high])


if __name__ == "__main__":
    unittest.main()
