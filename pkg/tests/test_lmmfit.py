import unittest

import numpy as np
from numpy.testing import assert_allclose
from scipy import stats

from semifmm.design import assemble
from semifmm.errors import ValidationError
from semifmm.lmmfit import MixedModel, df_at, effective_df_np, fit_reml, marginal_loglik
from semifmm.simulate import DesignFrame, simulation_rng, study_design
from semifmm.splinekit import df_lambda


def grouped_data(seed: int = 3, groups: int = 12, per_group: int = 6, q: float = 1.5, s: float = 0.5):
    rng = np.random.default_rng(seed)
    n = groups * per_group
    labels = np.repeat(np.arange(groups), per_group)
    Z = np.zeros((n, groups))
    Z[np.arange(n), labels] = 1.0
    x = rng.normal(size=n)
    X = np.column_stack([np.ones(n), x])
    y = X @ np.array([1.0, -0.5]) + Z @ rng.normal(scale=np.sqrt(q), size=groups) + rng.normal(scale=np.sqrt(s), size=n)
    return y, X, Z


class TestLikelihood(unittest.TestCase):
    def setUp(self):
        self.y, self.X, self.Z = grouped_data()
        self.sigma = 0.8 * self.Z @ self.Z.T + 0.4 * np.eye(self.y.size)

    def test_ml_with_known_beta_matches_dense_density(self):
        beta = np.array([0.9, -0.4])
        expected = stats.multivariate_normal(self.X @ beta, self.sigma).logpdf(self.y)
        got = marginal_loglik(self.y, self.X, [self.Z], [0.8], 0.4, beta)
        self.assertAlmostEqual(got, expected, places=8)

    def test_reml_matches_dense_formula(self):
        inv = np.linalg.inv(self.sigma)
        xsx = self.X.T @ inv @ self.X
        beta = np.linalg.solve(xsx, self.X.T @ inv @ self.y)
        r = self.y - self.X @ beta
        n, a = self.X.shape
        expected = -0.5 * (
            (n - a) * np.log(2 * np.pi) + np.linalg.slogdet(self.sigma)[1] + np.linalg.slogdet(xsx)[1] + r @ inv @ r
        )
        got = marginal_loglik(self.y, self.X, [self.Z], [0.8], 0.4, reml=True)
        self.assertAlmostEqual(got, expected, places=8)

    def test_gradient_matches_finite_difference(self):
        model = MixedModel(self.y, self.X, [self.Z])
        theta = np.log([0.8, 0.4])
        h = 1e-6
        for reml in (False, True):
            grad = model.gradient(np.exp(theta[:-1]), np.exp(theta[-1]), reml)
            for i in range(2):
                up, down = theta.copy(), theta.copy()
                up[i] += h
                down[i] -= h
                numeric = (
                    model.loglik(np.exp(up[:-1]), np.exp(up[-1]), reml=reml)
                    - model.loglik(np.exp(down[:-1]), np.exp(down[-1]), reml=reml)
                ) / (2 * h)
                self.assertAlmostEqual(grad[i], numeric, places=5)

    def test_negative_variance_is_rejected(self):
        with self.assertRaises(ValidationError):
            marginal_loglik(self.y, self.X, [self.Z], [-1.0], 0.4)


class TestFitReml(unittest.TestCase):
    def test_residual_only_model_has_closed_form(self):
        y, X, _ = grouped_data(seed=5)
        beta, *_ = np.linalg.lstsq(X, y, rcond=None)
        rss = float(np.sum((y - X @ beta) ** 2))
        reml = fit_reml(y, X, [], with_se=False)
        ml = fit_reml(y, X, [], method="ml", with_se=False)
        self.assertAlmostEqual(reml.s_hat, rss / (y.size - 2), delta=1e-4 * rss / y.size)
        self.assertAlmostEqual(ml.s_hat, rss / y.size, delta=1e-4 * rss / y.size)
        assert_allclose(reml.beta_hat, beta, atol=1e-8)

    def test_random_intercept_fit_beats_truth(self):
        y, X, Z = grouped_data(seed=8, groups=20)
        fit = fit_reml(y, X, [Z])
        self.assertTrue(fit.converged)
        self.assertGreater(fit.vc_hat[0], 0.0)
        truth = marginal_loglik(y, X, [Z], [1.5], 0.5, reml=True)
        self.assertGreaterEqual(fit.loglik_reml, truth - 1e-6)
        self.assertEqual(fit.vc_se.shape, (2,))
        self.assertTrue(np.all(fit.vc_se > 0))
        self.assertEqual(fit.variances.shape, (2,))

    def test_unknown_method(self):
        y, X, Z = grouped_data()
        with self.assertRaises(ValidationError):
            fit_reml(y, X, [Z], method="bayes")


class TestSplineDegreesOfFreedom(unittest.TestCase):
    def setUp(self):
        frame = DesignFrame(study_design(simulation_rng(2)))
        self.bundle = assemble(frame, "value ~ np(age)")

    def test_single_block_df_is_smoother_trace(self):
        info = self.bundle.spline_terms[0]
        expected = df_lambda(self.bundle.spline_basis(0), info.kit.dr.omega, 0.5 / 0.1)
        self.assertAlmostEqual(df_at(self.bundle, 0, np.array([0.1]), 0.5), expected, places=8)

    def test_zero_spline_variance_is_linear(self):
        self.assertEqual(df_at(self.bundle, 0, np.array([0.0]), 0.5), 2.0)

    def test_effective_df_of_fit(self):
        rng = np.random.default_rng(4)
        age = self.bundle.covariates["age"]
        y = np.sin(age / 10.0) + rng.normal(scale=0.2, size=age.size)
        fit = fit_reml(y, self.bundle.X, [b.design for b in self.bundle.blocks], with_se=False)
        df = effective_df_np(fit, self.bundle)
        self.assertGreaterEqual(df, 2.0 - 1e-9)
        self.assertLessEqual(df, self.bundle.spline_terms[0].kit.sdef.M + 4 + 1e-9)


if __name__ == "__main__":
    unittest.main()
