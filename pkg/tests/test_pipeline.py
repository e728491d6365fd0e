import csv
import json
import tempfile
import unittest
from pathlib import Path

from semifmm.dataset import ingest
from semifmm.errors import StaleArtifactError, ValidationError
from semifmm.pipeline import Pipeline
from semifmm.runconfig import DEFAULT_AGES, RunConfig


def small_config(output_dir: str, **overrides) -> RunConfig:
    payload = {
        "output_dir": output_dir,
        "seed": 11,
        "wavelet": {"levels": 2},
        "energy_threshold": 0.9,
        "formula": "value ~ lin(age) + (1 | eye)",
        "selection": {
            "fixed_candidates": ["value ~ lin(age)", "value ~ hyper(iop) + lin(age)"],
            "random_candidates": ["(1 | eye)"],
        },
        "chain": {"n_burn": 20, "n_keep": 40, "thin": 2, "min_set_size": 2},
        "inference": {"ages": [30, 50, 70], "level_ages": [50], "df_draws": 5, "df_locations": 20},
        "simulation": {
            "scenario": "linear_random",
            "n_meridional": 16,
            "n_circumferential": 16,
            "n_subjects": 4,
            "n_units": 6,
            "serial_levels": [7, 15, 30],
        },
    }
    payload.update(overrides)
    return RunConfig.from_dict(payload)


class TestPipeline(unittest.IsolatedAsyncioTestCase):
    async def asyncSetUp(self):
        self.temp_dir = tempfile.TemporaryDirectory()
        self.root = Path(self.temp_dir.name)
        self.pipeline = Pipeline(small_config(self.temp_dir.name))

    async def asyncTearDown(self):
        self.temp_dir.cleanup()

    async def test_stages_end_to_end(self):
        simulated = await self.pipeline.simulate()
        self.assertFalse(simulated.skipped)
        self.assertTrue((self.root / "simulate" / "dataset").is_dir())

        transformed = await self.pipeline.transform()
        self.assertEqual(transformed.manifest.details["n_functions"], 18)
        self.assertTrue((await self.pipeline.transform()).skipped)

        selected = await self.pipeline.select()
        payload = json.loads((self.root / "select" / "selection.json").read_text(encoding="utf-8"))
        self.assertEqual(payload["selected_formula"], selected.manifest.details["selected_formula"])
        self.assertTrue((self.root / "select" / "selection.txt").read_text(encoding="utf-8").strip())

        fitted = await self.pipeline.fit()
        K = fitted.manifest.details["K"]
        self.assertEqual(K, transformed.manifest.details["K"])
        self.assertEqual(len(list((self.root / "fit" / "chains").glob("coef_*.npz"))), K)
        self.assertTrue((await self.pipeline.fit()).skipped)

        await self.pipeline.diagnose()
        diagnostics = json.loads((self.root / "diagnose" / "diagnostics.json").read_text(encoding="utf-8"))
        self.assertEqual(diagnostics["n_coefficients"], K)
        self.assertIn("all", diagnostics["groups"])

        await self.pipeline.infer()
        infer_dir = self.root / "infer"
        self.assertTrue((infer_dir / "fixed_intercept.csv").exists())
        self.assertTrue((infer_dir / "fixed_lin_age.csv").exists())
        self.assertTrue((infer_dir / "correlation.json").exists())

        status = await self.pipeline.status()
        self.assertTrue(all(status["stages"][s] is not None for s in ("simulate", "transform", "select", "fit", "infer", "diagnose")))
        runs = await self.pipeline.store.list_runs(stage="fit")
        self.assertEqual(len(runs), 1)
        self.assertEqual(runs[0]["status"], "completed")

    async def test_changed_transform_output_blocks_downstream(self):
        await self.pipeline.simulate()
        await self.pipeline.transform()
        coefficients = self.root / "transform" / "coefficients.npz"
        coefficients.write_bytes(coefficients.read_bytes() + b"\0")
        with self.assertRaises(StaleArtifactError):
            await self.pipeline.select()
        failed = await self.pipeline.store.list_runs(stage="select")
        self.assertEqual(failed[0]["status"], "failed")

    async def test_transform_without_dataset(self):
        with self.assertRaises(ValidationError) as ctx:
            await self.pipeline.transform()
        self.assertEqual(ctx.exception.code, "missing_dataset")


class TestNonparametricInference(unittest.IsolatedAsyncioTestCase):
    async def asyncSetUp(self):
        self.temp_dir = tempfile.TemporaryDirectory()
        self.root = Path(self.temp_dir.name)
        config = small_config(
            self.temp_dir.name,
            formula="value ~ hyper(iop) + np(age) + (1 | eye)",
            inference={"df_draws": 5, "df_locations": 20},
            simulation={
                "scenario": "nonparametric",
                "n_meridional": 16,
                "n_circumferential": 16,
                "n_subjects": 8,
                "n_units": 10,
                "serial_levels": [7, 15, 30],
            },
        )
        self.assertEqual(config.inference.ages, DEFAULT_AGES)
        self.pipeline = Pipeline(config)

    async def asyncTearDown(self):
        self.temp_dir.cleanup()

    async def test_default_age_grid_is_limited_to_observed_ages(self):
        await self.pipeline.simulate()
        await self.pipeline.transform()
        await self.pipeline.fit()
        with self.assertLogs("semifmm", level="WARNING") as logs:
            await self.pipeline.infer()
        self.assertTrue(any("outside the observed range" in line for line in logs.output))

        observed = ingest(self.root / "simulate" / "dataset").covariate("age")
        infer_dir = self.root / "infer"
        for name in ("np_np_age.csv", "dauc_np_age.csv", "auc_np_age.csv"):
            with open(infer_dir / name, newline="", encoding="utf-8") as handle:
                ages = {float(row["age"]) for row in csv.DictReader(handle)}
            self.assertTrue(ages, name)
            self.assertGreaterEqual(min(ages), observed.min())
            self.assertLessEqual(max(ages), observed.max())
            self.assertEqual(ages, {a for a in DEFAULT_AGES if observed.min() <= a <= observed.max()})
        self.assertTrue((infer_dir / "mean_by_level.csv").exists())
        summary = json.loads((infer_dir / "summary.json").read_text(encoding="utf-8"))
        self.assertIn("np_np_age", summary["outputs"])


if __name__ == "__main__":
    unittest.main()
