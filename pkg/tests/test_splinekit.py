import unittest

import numpy as np
from numpy.testing import assert_allclose

from semifmm.errors import ValidationError
from semifmm.splinekit import (
    SplineBasisDef,
    bspline_design,
    df_lambda,
    penalized_fit,
    spline_kit,
)


class TestBasisAndPenalty(unittest.TestCase):
    def setUp(self):
        self.sdef = SplineBasisDef(20.0, 90.0, M=5)
        self.kit = spline_kit(self.sdef)
        self.x = np.linspace(20.0, 90.0, 50)

    def test_partition_of_unity(self):
        B = bspline_design(self.x, self.sdef)
        self.assertEqual(B.shape, (50, 9))
        assert_allclose(B.sum(axis=1), 1.0, atol=1e-12)

    def test_null_space_spans_straight_lines(self):
        B = self.kit.design(self.x)
        lines = B @ self.kit.dr.x_lin
        design = np.column_stack([np.ones_like(self.x), self.x])
        coef, *_ = np.linalg.lstsq(design, lines, rcond=None)
        assert_allclose(design @ coef, lines, atol=1e-10)
        self.assertEqual(self.kit.dr.n_random, self.sdef.M + 2)

    def test_split_and_combine_invert(self):
        nu = np.random.default_rng(0).normal(size=self.sdef.n_basis)
        beta, u = self.kit.dr.split(nu)
        assert_allclose(self.kit.dr.combine(beta, u), nu, atol=1e-10)

    def test_out_of_range_covariate(self):
        with self.assertRaises(ValidationError) as ctx:
            bspline_design([10.0], self.sdef)
        self.assertEqual(ctx.exception.code, "out_of_range")

    def test_derivative_matches_finite_difference(self):
        x = np.array([30.0, 55.5, 80.0])
        _, d_z = self.kit.derivative(x)
        h = 1e-5
        numeric = (self.kit.z_design(x + h) - self.kit.z_design(x - h)) / (2.0 * h)
        assert_allclose(d_z, numeric, rtol=1e-5, atol=1e-7)


class TestMixedModelEquivalence(unittest.TestCase):
    def test_mixed_model_fit_equals_penalized_solve(self):
        sdef = SplineBasisDef(0.0, 1.0, M=6)
        kit = spline_kit(sdef)
        rng = np.random.default_rng(1)
        x = np.sort(rng.uniform(0.0, 1.0, 60))
        B = kit.design(x)
        C = np.column_stack([B @ kit.dr.x_lin, kit.z_design(x)])
        for _ in range(20):
            y = np.sin(2 * np.pi * x) + rng.normal(scale=0.3, size=x.size)
            lam = 10.0 ** rng.uniform(-2.0, 2.0)
            direct = B @ penalized_fit(B, kit.dr.omega, y, lam)
            D = np.diag(np.r_[0.0, 0.0, np.full(kit.dr.n_random, lam)])
            theta = np.linalg.solve(C.T @ C + D, C.T @ y)
            assert_allclose(C @ theta, direct, atol=1e-8 * max(1.0, np.abs(direct).max()))

    def test_degrees_of_freedom_limits(self):
        sdef = SplineBasisDef(0.0, 1.0, M=5)
        kit = spline_kit(sdef)
        B = kit.design(np.linspace(0.0, 1.0, 80))
        self.assertAlmostEqual(df_lambda(B, kit.dr.omega, 1e10), 2.0, delta=1e-3)
        self.assertAlmostEqual(df_lambda(B, kit.dr.omega, 1e-10), sdef.M + 4, delta=1e-3)

    def test_degrees_of_freedom_is_trace_of_smoother(self):
        sdef = SplineBasisDef(0.0, 1.0, M=5)
        kit = spline_kit(sdef)
        B = kit.design(np.linspace(0.0, 1.0, 40))
        hat = B @ np.linalg.solve(B.T @ B + 0.5 * kit.dr.omega, B.T)
        self.assertAlmostEqual(df_lambda(B, kit.dr.omega, 0.5), float(np.trace(hat)), places=8)

    def test_lambda_must_be_positive(self):
        kit = spline_kit(SplineBasisDef(0.0, 1.0))
        with self.assertRaises(ValidationError):
            df_lambda(kit.design([0.1, 0.5, 0.9]), kit.dr.omega, 0.0)


if __name__ == "__main__":
    unittest.main()
