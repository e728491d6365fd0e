import unittest

import numpy as np
from numpy.testing import assert_allclose
from scipy import stats

from semifmm.design import assemble
from semifmm.errors import NumericalError, ValidationError
from semifmm.select import (
    common_lambda_loglik,
    penalty,
    random_structure,
    render_table,
    smoothness_compare,
    two_step_select,
    vote,
)
from semifmm.simulate import DesignFrame, simulation_rng, study_design


def frame_and_coefficients(K: int = 4, seed: int = 5):
    frame = DesignFrame(study_design(simulation_rng(seed), n_subjects=8, n_units=12))
    bundle = assemble(frame, "value ~ lin(age) + (1 | eye)")
    rng = np.random.default_rng(seed)
    eye = bundle.blocks[0].design
    coeffs = np.empty((bundle.n_obs, K))
    for k in range(K):
        coeffs[:, k] = (
            2.0 + 0.3 * bundle.X[:, 1] + eye @ rng.normal(scale=2.0, size=eye.shape[1])
            + rng.normal(scale=0.5, size=bundle.n_obs)
        )
    return frame, coeffs


class TestVote(unittest.TestCase):
    def test_weighted_shares(self):
        scores = np.array([[1.0, 5.0, 3.0], [2.0, 4.0, 1.0]])
        report = vote(["a", "b"], scores, np.array([0.5, 0.3, 0.2]))
        self.assertEqual(report.winners, ["a", "b", "b"])
        self.assertAlmostEqual(report.P["a"], 0.5)
        self.assertAlmostEqual(report.P["b"], 0.5)
        self.assertEqual(report.best, "a")

    def test_ties_go_to_fewer_parameters_then_id(self):
        scores = np.array([[1.0, 1.0], [1.0, 1.0]])
        n_par = np.array([[4.0, 3.0], [3.0, 3.0]])
        report = vote(["b", "a"], scores, np.array([0.5, 0.5]), n_par)
        self.assertEqual(report.winners, ["a", "a"])

    def test_failed_coefficients_are_excluded(self):
        scores = np.array([[np.nan, 1.0], [np.nan, 2.0]])
        report = vote(["a", "b"], scores, np.array([0.9, 0.1]))
        self.assertEqual(report.excluded, [0])
        self.assertEqual(report.winners, [None, "a"])
        self.assertAlmostEqual(report.P["a"], 1.0)

    def test_errors(self):
        with self.assertRaises(NumericalError):
            vote(["a"], np.array([[np.nan]]), np.array([1.0]))
        with self.assertRaises(ValidationError):
            vote(["a", "b"], np.ones((2, 3)), np.ones(2))
        with self.assertRaises(ValidationError):
            vote([], np.ones((0, 1)), np.ones(1))

    def test_render_marks_best(self):
        report = vote(["value ~ 1", "value ~ lin(age)"], np.array([[3.0, 3.0], [1.0, 2.0]]), np.array([0.5, 0.5]))
        table = render_table(report)
        self.assertIn("value ~ lin(age)", table)
        self.assertTrue(any(line.endswith(" *") and "lin(age)" in line for line in table.splitlines()))


class TestCriteria(unittest.TestCase):
    def test_penalties(self):
        self.assertAlmostEqual(penalty(3, 100), 3 * np.log(100))
        self.assertEqual(penalty(3, 100, "aAIC"), 6.0)
        with self.assertRaises(ValidationError):
            penalty(3, 100, "DIC")

    def test_random_structure(self):
        self.assertEqual(random_structure("").random_levels, ())
        self.assertEqual(len(random_structure("(1 | eye) + (1 | subject)").random_levels), 2)
        with self.assertRaises(ValidationError):
            random_structure("lin(age) + (1 | eye)")

    def test_common_lambda_loglik_matches_dense(self):
        rng = np.random.default_rng(9)
        Z = rng.normal(size=(25, 4))
        X = np.column_stack([np.ones(25), rng.normal(size=25)])
        y = rng.normal(size=25)
        lam = 0.7
        M = Z @ Z.T + lam * np.eye(25)
        inv = np.linalg.inv(M)
        beta = np.linalg.solve(X.T @ inv @ X, X.T @ inv @ y)
        r = y - X @ beta
        sigma2 = r @ inv @ r / 25
        expected = stats.multivariate_normal(X @ beta, sigma2 * M).logpdf(y)
        assert_allclose(common_lambda_loglik(y, X, Z, lam), [expected], rtol=1e-8)


class TestSelection(unittest.TestCase):
    def test_two_step_recovers_generating_structure(self):
        frame, coeffs = frame_and_coefficients()
        result = two_step_select(
            ["value ~ 1", "value ~ lin(age)"],
            ["", "(1 | eye)"],
            frame,
            coeffs,
            np.full(coeffs.shape[1], 0.25),
        )
        self.assertEqual(result.best_fixed, "value ~ lin(age)")
        self.assertEqual(result.best_random, "(1 | eye)")
        fixed_report, random_report = result.reports
        self.assertEqual(fixed_report.details["baseline_random"], "(1 | eye)")
        self.assertEqual(random_report.candidates, ["none", "(1 | eye)"])
        self.assertAlmostEqual(sum(random_report.P.values()), 1.0)

    def test_smoothness_compare(self):
        frame, coeffs = frame_and_coefficients(K=3)
        report = smoothness_compare(coeffs, frame, "value ~ np(age)", [0.1, 1.0, 10.0], np.full(3, 1 / 3))
        self.assertEqual(report.candidates, ["varying", "common"])
        self.assertIn(report.details["lambda"], (0.1, 1.0, 10.0))
        self.assertEqual(len(report.details["P_varying_by_lambda"]), 3)
        self.assertAlmostEqual(report.P["varying"] + report.P["common"], 1.0)

    def test_smoothness_compare_rejects_other_random_levels(self):
        frame, coeffs = frame_and_coefficients(K=1)
        with self.assertRaises(ValidationError):
            smoothness_compare(coeffs, frame, "value ~ np(age) + (1 | eye)", [1.0], np.ones(1))
        with self.assertRaises(ValidationError):
            smoothness_compare(coeffs, frame, "value ~ np(age)", [], np.ones(1))


if __name__ == "__main__":
    unittest.main()
