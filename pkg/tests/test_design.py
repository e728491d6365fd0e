import unittest

import numpy as np
from numpy.testing import assert_allclose

from semifmm.design import assemble, hyperbolic_basis, serial_covariance
from semifmm.errors import ValidationError
from semifmm.simulate import DesignFrame, simulation_rng, study_design

LEVELS = (7.0, 10.0, 15.0, 20.0, 25.0, 30.0, 35.0, 40.0, 45.0)


class TestSerialBasis(unittest.TestCase):
    def test_hyperbolic_columns_are_centered_and_orthogonal(self):
        basis = hyperbolic_basis(LEVELS)
        G = basis.slope_columns(LEVELS)
        self.assertEqual(basis.names, ["G0", "G1", "G2"])
        self.assertEqual(basis.D, 2)
        assert_allclose(G.sum(axis=0), 0.0, atol=1e-12)
        self.assertAlmostEqual(float(G[:, 0] @ G[:, 1]), 0.0, places=12)

    def test_needs_three_positive_levels(self):
        with self.assertRaises(ValidationError) as ctx:
            hyperbolic_basis([7.0, 10.0])
        self.assertEqual(ctx.exception.code, "too_few_levels")
        with self.assertRaises(ValidationError):
            hyperbolic_basis([0.0, 7.0, 10.0])

    def test_serial_covariance_shapes(self):
        basis = hyperbolic_basis(LEVELS)
        q = np.array([1.0, 0.5, 0.2])
        cov = serial_covariance(basis, q, LEVELS, LEVELS)
        self.assertEqual(cov.shape, (9, 9))
        assert_allclose(cov, cov.T)
        self.assertIsInstance(serial_covariance(basis, q, 15.0, 30.0), float)
        with self.assertRaises(ValidationError):
            serial_covariance(basis, [1.0, -1.0, 0.0], 15.0, 30.0)


class TestAssemble(unittest.TestCase):
    def setUp(self):
        self.frame = DesignFrame(study_design(simulation_rng(7)))

    def test_glaucoma_design(self):
        bundle = assemble(self.frame, "value ~ hyper(iop) + np(age) + (hyper(iop) | eye)")
        self.assertEqual(bundle.n_obs, 306)
        self.assertEqual(bundle.fixed_names, ["(Intercept)", "hyper(iop)[G1]", "hyper(iop)[G2]", "np(age)[lin]"])
        self.assertEqual(bundle.vc_names, ["spline:age", "eye:(Intercept)", "eye:G1", "eye:G2"])
        self.assertEqual(bundle.blocks[0].width, 7)
        self.assertEqual(bundle.blocks[1].width, 34)
        info = bundle.spline_terms[0]
        self.assertEqual(info.fixed_column, 3)
        self.assertEqual(info.block, 0)
        assert_allclose(bundle.X[:, 3].mean(), 0.0, atol=1e-10)

    def test_marginal_covariance_matches_columns(self):
        bundle = assemble(self.frame, "value ~ lin(age) + (1 | eye) + (1 | subject)")
        vc = [0.7, 0.2]
        Z = bundle.z_matrix()
        expected = (Z * bundle.column_variances(vc)) @ Z.T + 0.1 * np.eye(bundle.n_obs)
        assert_allclose(bundle.marginal_covariance(vc, 0.1), expected)
        self.assertEqual(bundle.block_index("subject:(Intercept)"), 1)

    def test_interaction_multiplies_spline(self):
        bundle = assemble(self.frame, "value ~ hyper(iop) + hyper(iop):np(age)")
        self.assertEqual(len(bundle.spline_terms), 2)
        self.assertEqual([t.multiplier for t in bundle.spline_terms], ["hyper(iop)[G1]", "hyper(iop)[G2]"])
        B = bundle.spline_basis(0)
        self.assertEqual(B.shape[0], 306)

    def test_reference_reuses_constants(self):
        bundle = assemble(self.frame, "value ~ hyper(iop) + np(age)")
        other = DesignFrame(self.frame.records[:27])
        shared = assemble(other, bundle.spec, reference=bundle)
        self.assertEqual(shared.centers["age"], bundle.centers["age"])
        self.assertIs(shared.spline_terms[0].kit, bundle.spline_terms[0].kit)
        self.assertEqual(shared.serial_bases["iop"], bundle.serial_bases["iop"])

    def test_unknown_grouping(self):
        with self.assertRaises(ValidationError) as ctx:
            assemble(self.frame, "value ~ 1 + (1 | ward)")
        self.assertEqual(ctx.exception.code, "unknown_grouping")

    def test_too_few_observations(self):
        tiny = DesignFrame(study_design(simulation_rng(9), n_subjects=1, n_units=1, levels=(7.0, 10.0, 15.0)))
        with self.assertRaises(ValidationError) as ctx:
            assemble(tiny, "value ~ hyper(iop) + lin(age)")
        self.assertEqual(ctx.exception.code, "underdetermined")


if __name__ == "__main__":
    unittest.main()
