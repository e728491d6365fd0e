import csv
import tempfile
import unittest
from pathlib import Path

import numpy as np
from numpy.testing import assert_allclose

from semifmm.basis import BasisSystem, TensorLayout, WaveletSpec
from semifmm.dataset import SurfaceGrid
from semifmm.design import assemble, hyperbolic_basis
from semifmm.errors import ValidationError
from semifmm.inference import (
    PERIPAPILLARY,
    PosteriorSurface,
    Region,
    StackedPosterior,
    ages_in_range,
    aggregate,
    auc,
    auc_derivative,
    back_project,
    df_map,
    induced_correlation_maps,
    joint_band,
    np_surface,
    region_weights,
    serial_correlation,
    serial_integrals,
    stack_bands,
    stack_posteriors,
    write_band_csv,
)
from semifmm.mcmc import CoefficientPosterior
from semifmm.runconfig import DEFAULT_AGES
from semifmm.simulate import DesignFrame, simulation_rng, study_design
from semifmm.splinekit import df_from_gram

GRID = SurfaceGrid(32, 32)


def random_basis(K: int = 3, seed: int = 0) -> BasisSystem:
    rng = np.random.default_rng(seed)
    return BasisSystem(
        layout=TensorLayout.for_grid(WaveletSpec(), 32, 32),
        retained=np.arange(K),
        psi=rng.normal(size=(K, GRID.size)),
        weights=np.full(K, 1.0 / K),
        kind="pc",
    )


def stacked_for(bundle, G: int, K: int, seed: int = 0, u_zero: bool = False) -> StackedPosterior:
    rng = np.random.default_rng(seed)
    u = {
        info.label: np.zeros((G, K, info.kit.dr.n_random)) if u_zero else rng.normal(size=(G, K, info.kit.dr.n_random))
        for info in bundle.spline_terms
    }
    return StackedPosterior(
        b=rng.normal(size=(G, K, bundle.n_fixed)),
        vc=np.abs(rng.normal(size=(G, K, bundle.n_vc))) + 0.1,
        s=np.abs(rng.normal(size=(G, K))) + 0.1,
        u=u,
        fixed_names=list(bundle.fixed_names),
        vc_names=list(bundle.vc_names),
    )


class TestSerialIntegrals(unittest.TestCase):
    def test_hyperbolic_integrals_have_closed_form(self):
        serial = hyperbolic_basis((7.0, 10.0, 15.0, 20.0, 25.0, 30.0, 35.0, 40.0, 45.0))
        width = 45.0 - 7.0
        int_x1 = ((45.0 ** 2 - 7.0 ** 2) / 2.0 - serial.p_mean * width) / serial.p_norm
        int_x2 = (np.log(45.0 / 7.0) - serial.inv_mean * width) / serial.inv_norm
        expected = np.array([int_x1 - int_x2, int_x1 + int_x2]) * np.sqrt(2.0) / 2.0
        assert_allclose(serial_integrals(serial), expected, rtol=1e-10)

    def test_bad_range(self):
        with self.assertRaises(ValidationError):
            serial_integrals(hyperbolic_basis((7.0, 10.0, 15.0)), 0.0, 10.0)

    def test_auc_adds_weighted_slopes(self):
        serial = hyperbolic_basis((7.0, 10.0, 15.0, 20.0))
        w = serial_integrals(serial)
        f = PosteriorSurface("f", np.zeros((4, 2, 5)), {"age": np.array([30.0, 50.0])})
        slopes = [PosteriorSurface("B1", np.ones((4, 5))), PosteriorSurface("B2", 2.0 * np.ones((4, 5)))]
        out = auc(f, slopes, serial)
        assert_allclose(out.draws, np.full((4, 2, 5), w[0] + 2.0 * w[1]))
        with self.assertRaises(ValidationError):
            auc(f, slopes[:1], serial)


class TestBands(unittest.TestCase):
    def test_joint_band_contains_pointwise_and_covers_draws(self):
        draws = np.random.default_rng(3).normal(size=(2000, 40))
        band = joint_band(PosteriorSurface("x", draws), alpha=0.05)
        self.assertTrue(np.all(band.joint_lo <= band.pw_lo))
        self.assertTrue(np.all(band.joint_hi >= band.pw_hi))
        inside = np.all((draws >= band.joint_lo) & (draws <= band.joint_hi), axis=1).mean()
        self.assertGreaterEqual(inside, 0.94)
        self.assertGreater(band.critical, 1.96)

    def test_zero_sd_points_collapse(self):
        draws = np.random.default_rng(4).normal(size=(200, 3))
        draws[:, 1] = 2.5
        with self.assertLogs("semifmm", level="WARNING"):
            band = joint_band(PosteriorSurface("x", draws))
        self.assertTrue(band.zero_sd[1])
        self.assertEqual((band.joint_lo[1], band.joint_hi[1]), (2.5, 2.5))

    def test_stacked_bands_keep_largest_critical(self):
        rng = np.random.default_rng(5)
        bands = [joint_band(PosteriorSurface("x", rng.normal(size=(300, 6)))) for _ in range(3)]
        stacked = stack_bands(bands)
        self.assertEqual(stacked.mean.shape, (3, 6))
        self.assertEqual(stacked.critical, max(b.critical for b in bands))

    def test_band_csv(self):
        band = joint_band(PosteriorSurface("x", np.random.default_rng(6).normal(size=(150, 2, GRID.size))))
        with tempfile.TemporaryDirectory() as temp_dir:
            path = write_band_csv(Path(temp_dir) / "band.csv", band, GRID, slice_labels=[{"age": 30.0}, {"age": 50.0}])
            with path.open(encoding="utf-8") as handle:
                rows = list(csv.DictReader(handle))
        self.assertEqual(len(rows), 2 * GRID.size)
        self.assertEqual(list(rows[0])[:5], ["slice", "age", "location", "theta", "phi"])
        self.assertEqual(float(rows[-1]["age"]), 50.0)


class TestSurfaces(unittest.TestCase):
    def setUp(self):
        frame = DesignFrame(study_design(simulation_rng(4), n_subjects=6, n_units=8))
        self.bundle = assemble(frame, "value ~ np(age)")
        self.basis = random_basis()

    def test_back_project_is_linear_in_coefficients(self):
        draws = np.random.default_rng(7).normal(size=(10, 3))
        surface = back_project(draws, self.basis, targets=[0, 5])
        assert_allclose(surface.draws, draws @ self.basis.psi[:, [0, 5]])
        with self.assertRaises(ValidationError):
            back_project(np.ones((10, 4)), self.basis)
        with self.assertRaises(ValidationError):
            back_project(draws, self.basis, targets=[GRID.size])

    def test_linear_part_of_spline_surface(self):
        stacked = stacked_for(self.bundle, G=5, K=3, u_zero=True)
        ages = np.sort(self.bundle.covariates["age"])[[0, -1]]
        surface = np_surface(stacked, self.bundle, self.basis, ages=ages, targets=[1, 2])
        center = self.bundle.spline_terms[0].center
        lin = stacked.b[:, :, 1] @ self.basis.psi[:, [1, 2]]
        expected = (ages - center)[None, :, None] * lin[:, None, :]
        assert_allclose(surface.draws, expected, atol=1e-10)
        slope = auc_derivative(stacked, self.bundle, self.basis, ages=ages, targets=[1, 2])
        assert_allclose(slope.draws, np.repeat(lin[:, None, :], 2, axis=1), atol=1e-10)

    def test_ages_outside_spline_range_are_dropped(self):
        low, high = self.bundle.covariate_range("age")
        requested = [low - 1.0, *DEFAULT_AGES, high + 1.0]
        with self.assertLogs("semifmm", level="WARNING"):
            kept = ages_in_range(requested, self.bundle)
        inside = [a for a in DEFAULT_AGES if low <= a <= high]
        assert_allclose(kept, inside)
        stacked = stacked_for(self.bundle, G=4, K=3)
        surface = np_surface(stacked, self.bundle, self.basis, ages=kept)
        self.assertEqual(surface.draws.shape, (4, len(inside), GRID.size))
        with self.assertRaises(ValidationError):
            np_surface(stacked, self.bundle, self.basis, ages=[low - 1.0])

        linear = assemble(DesignFrame(study_design(simulation_rng(4), n_subjects=6, n_units=8)), "value ~ lin(age)")
        self.assertIsNone(linear.covariate_range("age"))
        assert_allclose(ages_in_range(requested, linear), requested)

    def test_df_map_without_other_levels(self):
        stacked = stacked_for(self.bundle, G=2, K=3)
        stacked.vc[0, :, 0] = 0.0
        from semifmm.inference import data_space_variances

        variances = data_space_variances(stacked, self.basis, targets=[0, 1, 2])
        out = df_map(variances, self.bundle)
        self.assertEqual(out.draws.shape, (2, 3))
        B = self.bundle.spline_basis(0)
        q = variances["spline:age"][1, 2]
        expected = df_from_gram(B.T @ B, self.bundle.spline_terms[0].kit.dr.omega, variances["s"][1, 2] / q)
        self.assertAlmostEqual(out.draws[1, 2], max(expected, 2.0), places=8)
        self.assertTrue(np.all(out.draws >= 2.0))

    def test_stack_posteriors_alignment(self):
        def posterior(k, names):
            return CoefficientPosterior(k, names, [], np.zeros((4, len(names))), np.ones((4, len(names)), dtype=bool),
                                        np.zeros((4, 0)), np.ones(4), {}, np.array([0.4]))

        stacked = stack_posteriors([posterior(0, ["a"]), posterior(1, ["a"])])
        self.assertEqual(stacked.b.shape, (4, 2, 1))
        with self.assertRaises(ValidationError):
            stack_posteriors([posterior(0, ["a"]), posterior(1, ["b"])])
        with self.assertRaises(ValidationError):
            stacked.fixed("missing")


class TestCorrelation(unittest.TestCase):
    def test_random_intercept_gives_compound_symmetry(self):
        frame = DesignFrame(study_design(simulation_rng(5), n_subjects=6, n_units=8))
        bundle = assemble(frame, "value ~ hyper(iop) + (1 | eye)")
        corr = serial_correlation({"eye:(Intercept)": 3.0, "s": 1.0}, bundle, "iop", [7.0, 20.0, 45.0])
        expected = np.full((3, 3), 0.75)
        np.fill_diagonal(expected, 1.0)
        assert_allclose(corr, expected)

    def test_induced_correlation_is_one_at_reference(self):
        basis = random_basis()
        maps = induced_correlation_maps({"eye:(Intercept)": np.array([1.0, 0.5, 0.2])}, basis, reference=10)
        self.assertAlmostEqual(maps["eye:(Intercept)"][10], 1.0)
        self.assertTrue(np.all(np.abs(maps["eye:(Intercept)"]) <= 1.0 + 1e-12))
        with self.assertRaises(ValidationError):
            induced_correlation_maps({"s": np.ones(3)}, basis, reference=GRID.size)


class TestRegions(unittest.TestCase):
    def test_band_weights_follow_sine_of_theta(self):
        W = region_weights(GRID, PERIPAPILLARY)
        self.assertAlmostEqual(W.sum(), 1.0)
        theta = GRID.theta()
        rows = W[:, 0].reshape(GRID.shape).sum(axis=1)
        inside = (theta >= 9.0) & (theta <= 17.0)
        assert_allclose(rows[~inside], 0.0)
        ratio = rows[inside] / np.sin(np.deg2rad(theta[inside]))
        assert_allclose(ratio, ratio[0])

    def test_aggregate_constant_surface(self):
        surface = PosteriorSurface("x", np.full((4, GRID.size), 3.0), {"location": np.arange(GRID.size)})
        assert_allclose(aggregate(surface, GRID, PERIPAPILLARY).draws, 3.0)
        rings = aggregate(surface, GRID, Region("circumferential", name="ring"))
        self.assertEqual(rings.draws.shape, (4, GRID.n_meridional))
        self.assertIn("theta", rings.axes)

    def test_custom_region_validation(self):
        with self.assertRaises(ValidationError):
            region_weights(GRID, Region("custom", weights=(1.0, 2.0)))
        with self.assertRaises(ValidationError):
            region_weights(GRID, Region("band", (30.0, 40.0)))


if __name__ == "__main__":
    unittest.main()
