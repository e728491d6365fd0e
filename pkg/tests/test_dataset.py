import json
import tempfile
import unittest
from pathlib import Path

import numpy as np
from numpy.testing import assert_allclose

from semifmm.dataset import (
    MANIFEST_NAME,
    FunctionalDataset,
    FunctionRecord,
    SurfaceGrid,
    ingest,
    save_dataset,
)
from semifmm.errors import ValidationError


def tiny_dataset(n: int = 4) -> FunctionalDataset:
    grid = SurfaceGrid(8, 10)
    records = [
        FunctionRecord(f"S{i // 2}-OD-p{7 + i}", f"S{i // 2}", f"S{i // 2}-OD", 7.0 + i, {"age": 40.0 + i})
        for i in range(n)
    ]
    values = np.random.default_rng(0).normal(size=(n,) + grid.shape)
    return FunctionalDataset(grid, records, values)


class TestSurfaceGrid(unittest.TestCase):
    def test_axes(self):
        grid = SurfaceGrid(8, 12, theta_range=(9.0, 23.0))
        self.assertEqual(grid.theta()[-1], 23.0)
        self.assertEqual(grid.phi()[1], 30.0)
        self.assertEqual(grid.flat_index(2, 3), 27)
        self.assertEqual(SurfaceGrid.from_dict(grid.to_dict()), grid)

    def test_rejects_small_grids(self):
        with self.assertRaises(ValidationError) as ctx:
            SurfaceGrid(4, 32)
        self.assertEqual(ctx.exception.code, "grid_too_small")
        with self.assertRaises(ValidationError):
            SurfaceGrid.from_dict({"n_meridional": 8})


class TestFunctionalDataset(unittest.TestCase):
    def test_metadata_access(self):
        dataset = tiny_dataset()
        assert_allclose(dataset.covariate("iop"), [7.0, 8.0, 9.0, 10.0])
        assert_allclose(dataset.covariate("age"), [40.0, 41.0, 42.0, 43.0])
        self.assertEqual(dataset.labels("eye"), dataset.labels("unit"))
        self.assertEqual(dataset.matrix().shape, (4, 80))
        summary = dataset.summary()
        self.assertEqual(summary["n_subjects"], 2)
        self.assertEqual(summary["covariate_ranges"]["age"], [40.0, 43.0])
        with self.assertRaises(ValidationError):
            dataset.covariate("sex")
        with self.assertRaises(ValidationError):
            dataset.labels("clinic")

    def test_non_finite_values_are_located(self):
        dataset = tiny_dataset()
        values = dataset.values.copy()
        values[2, 3, 4] = np.nan
        with self.assertRaises(ValidationError) as ctx:
            dataset.with_values(values)
        self.assertEqual(ctx.exception.code, "non_finite")
        self.assertIn("S1-OD-p9@(3,4)", str(ctx.exception))


class TestStorage(unittest.TestCase):
    def test_round_trip_for_every_storage(self):
        dataset = tiny_dataset()
        for storage in ("npz", "npy", "csv"):
            with tempfile.TemporaryDirectory() as temp_dir:
                written = save_dataset(dataset, temp_dir, storage=storage)
                self.assertEqual(written[-1].name, MANIFEST_NAME)
                loaded = ingest(temp_dir)
            assert_allclose(loaded.values, dataset.values, rtol=0, atol=0)
            self.assertEqual(loaded.records, dataset.records)

    def test_manifest_path_is_accepted(self):
        with tempfile.TemporaryDirectory() as temp_dir:
            save_dataset(tiny_dataset(), temp_dir)
            self.assertEqual(ingest(Path(temp_dir) / MANIFEST_NAME).n_functions, 4)

    def test_manifest_errors(self):
        with tempfile.TemporaryDirectory() as temp_dir:
            root = Path(temp_dir)
            with self.assertRaises(ValidationError) as ctx:
                ingest(root)
            self.assertEqual(ctx.exception.code, "missing_manifest")

            save_dataset(tiny_dataset(), root, storage="npy")
            manifest = json.loads((root / MANIFEST_NAME).read_text(encoding="utf-8"))

            broken = dict(manifest, functions=[manifest["functions"][0], manifest["functions"][0]])
            (root / MANIFEST_NAME).write_text(json.dumps(broken), encoding="utf-8")
            with self.assertRaises(ValidationError) as ctx:
                ingest(root)
            self.assertEqual(ctx.exception.code, "duplicate_id")

            missing = dict(manifest, functions=[{k: v for k, v in manifest["functions"][0].items() if k != "unit"}])
            (root / MANIFEST_NAME).write_text(json.dumps(missing), encoding="utf-8")
            with self.assertRaises(ValidationError) as ctx:
                ingest(root)
            self.assertEqual(ctx.exception.code, "missing_metadata")

            np.save(root / "f00000.npy", np.zeros((5, 5)))
            (root / MANIFEST_NAME).write_text(json.dumps(manifest), encoding="utf-8")
            with self.assertRaises(ValidationError) as ctx:
                ingest(root)
            self.assertEqual(ctx.exception.code, "dimension_mismatch")

            (root / MANIFEST_NAME).write_text("{not json", encoding="utf-8")
            with self.assertRaises(ValidationError) as ctx:
                ingest(root)
            self.assertEqual(ctx.exception.code, "bad_manifest")

    def test_unknown_storage(self):
        with tempfile.TemporaryDirectory() as temp_dir:
            with self.assertRaises(ValidationError):
                save_dataset(tiny_dataset(), temp_dir, storage="hdf5")


if __name__ == "__main__":
    unittest.main()
