import json
import tempfile
import time
import unittest
from pathlib import Path

from semifmm.artifacts import MANIFEST_FILE, ArtifactStore, RunManifest
from semifmm.errors import StaleArtifactError, ValidationError


class TestArtifactStore(unittest.TestCase):
    def setUp(self):
        self.temp_dir = tempfile.TemporaryDirectory()
        self.store = ArtifactStore(self.temp_dir.name)
        self.source = Path(self.temp_dir.name) / "source.txt"
        self.source.write_text("input", encoding="utf-8")

    def tearDown(self):
        self.temp_dir.cleanup()

    def record_transform(self) -> Path:
        output = self.store.path("transform", "basis.npz")
        output.write_bytes(b"basis")
        self.store.record("transform", config_hash="abc", started=time.time(), inputs=[self.source], outputs=[output],
                          seeds={"master": 7})
        return output

    def test_record_and_load(self):
        self.record_transform()
        manifest = self.store.load("transform", config_hash="abc")
        self.assertEqual(manifest.seeds, {"master": 7})
        self.assertIn("transform/basis.npz", manifest.outputs)
        self.assertIn("source.txt", manifest.inputs)
        self.assertIn("total", manifest.timings)

    def test_changed_output_is_stale(self):
        output = self.record_transform()
        output.write_bytes(b"tampered")
        with self.assertRaises(StaleArtifactError) as ctx:
            self.store.load("transform")
        self.assertIn("changed", str(ctx.exception))
        self.assertFalse(self.store.is_current("transform", "abc", [self.source]))

    def test_missing_stage(self):
        with self.assertRaises(ValidationError) as ctx:
            self.store.load("fit")
        self.assertEqual(ctx.exception.code, "missing_stage")
        with self.assertRaises(ValidationError):
            self.store.stage_dir("publish")

    def test_is_current_tracks_config_and_inputs(self):
        self.record_transform()
        self.assertTrue(self.store.is_current("transform", "abc", [self.source]))
        self.assertFalse(self.store.is_current("transform", "other", [self.source]))
        self.source.write_text("new input", encoding="utf-8")
        self.assertFalse(self.store.is_current("transform", "abc", [self.source]))

    def test_malformed_manifest_is_quarantined(self):
        path = self.store.stage_dir("select") / MANIFEST_FILE
        path.write_text("{broken", encoding="utf-8")
        self.assertIsNone(self.store.read_manifest("select"))
        self.assertFalse(path.exists())
        self.assertEqual(len(list(path.parent.glob("manifest.malformed.*.json"))), 1)

    def test_status_lists_every_stage(self):
        self.record_transform()
        status = self.store.status()
        self.assertIsNone(status["fit"])
        self.assertEqual(status["transform"]["outputs"], ["transform/basis.npz"])

    def test_manifest_round_trip(self):
        manifest = RunManifest(stage="fit", config_hash="h", details={"K": 3})
        self.assertEqual(RunManifest.from_dict(json.loads(json.dumps(manifest.to_dict()))), manifest)
        with self.assertRaises(ValueError):
            RunManifest.from_dict({"stage": "fit"})


if __name__ == "__main__":
    unittest.main()
