"""
Stage directories and run manifests.

Every stage writes its outputs under `<output>/<stage>/` and finishes by writing
`manifest.json` there. The manifest records sha256 checksums of the files the stage read
and the files it wrote; loading a stage re-checks both against the disk.
"""
import json
import time
from dataclasses import asdict, dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional

from typing_extensions import Self

from .config import logger
from .errors import StaleArtifactError, ValidationError
from .utils import PathLike, file_checksum, write_json_atomic
from .version import VERSION

STAGES = ("simulate", "transform", "select", "fit", "infer", "diagnose")
MANIFEST_FILE = "manifest.json"
MANIFEST_FORMAT = "semifmm-run-manifest/v1"


@dataclass
class RunManifest:
    stage: str
    config_hash: str
    version: str = VERSION
    started_at: str = ""
    finished_at: str = ""
    timings: Dict[str, float] = field(default_factory=dict)
    seeds: Dict[str, int] = field(default_factory=dict)
    inputs: Dict[str, str] = field(default_factory=dict)
    outputs: Dict[str, str] = field(default_factory=dict)
    details: Dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        return dict(asdict(self), format=MANIFEST_FORMAT)

    @classmethod
    def from_dict(cls, payload: Dict[str, Any]) -> Self:
        if not isinstance(payload, dict) or payload.get("format") != MANIFEST_FORMAT:
            raise ValueError("not a run manifest")
        known = {k: v for k, v in payload.items() if k in cls.__dataclass_fields__}
        if "stage" not in known or "config_hash" not in known:
            raise ValueError("manifest lacks stage or config_hash")
        return cls(**known)


class ArtifactStore:
    """Stage directories under one output root."""

    def __init__(self, root: PathLike):
        self.root = Path(root)

    def stage_dir(self, stage: str) -> Path:
        if stage not in STAGES:
            raise ValidationError(f"unknown stage {stage!r}", code="unknown_stage")
        path = self.root / stage
        path.mkdir(parents=True, exist_ok=True)
        return path

    def path(self, stage: str, name: str) -> Path:
        return self.stage_dir(stage) / name

    def manifest_path(self, stage: str) -> Path:
        return self.root / stage / MANIFEST_FILE

    def _key(self, path: PathLike) -> str:
        path = Path(path).resolve()
        try:
            return path.relative_to(self.root.resolve()).as_posix()
        except ValueError:
            return str(path)

    def _resolve(self, key: str) -> Path:
        path = Path(key)
        return path if path.is_absolute() else self.root / path

    def _safe_remove(self, file_path: Path, *, reason: str) -> None:
        try:
            if file_path.exists():
                file_path.unlink()
                logger.info(f"🧹 Removed {reason}: {file_path.name}")
        except Exception as cleanup_error:
            logger.warning(f"⚠️ Could not remove {reason} {file_path}: {cleanup_error}")

    def _quarantine_malformed_file(self, file_path: Path, *, reason: str) -> None:
        """Rename a malformed manifest aside for diagnosis."""
        if not file_path.exists():
            return
        quarantine_path = file_path.with_name(f"{file_path.stem}.malformed.{int(time.time() * 1000)}.json")
        try:
            file_path.rename(quarantine_path)
            logger.warning(f"⚠️ Quarantined malformed manifest ({reason}): {quarantine_path.name}")
        except Exception as quarantine_error:
            logger.warning(f"⚠️ Could not quarantine malformed manifest {file_path}: {quarantine_error}")
            self._safe_remove(file_path, reason=f"malformed manifest ({reason})")

    def read_manifest(self, stage: str) -> Optional[RunManifest]:
        """The stage's manifest, or None when absent or malformed."""
        path = self.manifest_path(stage)
        if not path.exists():
            return None
        try:
            return RunManifest.from_dict(json.loads(path.read_text(encoding="utf-8")))
        except (json.JSONDecodeError, UnicodeDecodeError, TypeError, ValueError) as e:
            self._quarantine_malformed_file(path, reason=str(e))
            return None

    def record(
        self,
        stage: str,
        *,
        config_hash: str,
        started: float,
        inputs: Iterable[PathLike] = (),
        outputs: Iterable[PathLike] = (),
        seeds: Optional[Dict[str, int]] = None,
        timings: Optional[Dict[str, float]] = None,
        details: Optional[Dict[str, Any]] = None,
    ) -> RunManifest:
        """Checksum inputs and outputs and write the stage manifest atomically."""
        finished = time.time()
        manifest = RunManifest(
            stage=stage,
            config_hash=config_hash,
            started_at=datetime.fromtimestamp(started).isoformat(),
            finished_at=datetime.fromtimestamp(finished).isoformat(),
            timings=dict(timings or {}, total=round(finished - started, 3)),
            seeds=dict(seeds or {}),
            inputs={self._key(p): file_checksum(p) for p in inputs},
            outputs={self._key(p): file_checksum(p) for p in outputs},
            details=dict(details or {}),
        )
        write_json_atomic(self.stage_dir(stage) / MANIFEST_FILE, manifest.to_dict())
        logger.info(f"✅ Stage {stage} recorded ({len(manifest.outputs)} outputs, {manifest.timings['total']:.1f}s)")
        return manifest

    def _mismatches(self, recorded: Dict[str, str]) -> List[str]:
        stale = []
        for key, checksum in recorded.items():
            path = self._resolve(key)
            if not path.exists():
                stale.append(f"{key} (missing)")
            elif file_checksum(path) != checksum:
                stale.append(f"{key} (changed)")
        return stale

    def load(self, stage: str, *, config_hash: Optional[str] = None) -> RunManifest:
        """Manifest of a completed stage whose recorded inputs and outputs are unchanged on disk."""
        manifest = self.read_manifest(stage)
        if manifest is None:
            raise ValidationError(f"stage {stage!r} has not completed; run `semifmm {stage}` first",
                                  code="missing_stage")
        stale = self._mismatches(manifest.inputs) + self._mismatches(manifest.outputs)
        if stale:
            raise StaleArtifactError(f"stage {stage!r} artifacts are stale: {', '.join(stale[:5])}")
        if config_hash is not None and manifest.config_hash != config_hash:
            logger.warning(f"⚠️ Stage {stage} was produced under a different config ({manifest.config_hash[:12]})")
        return manifest

    def is_current(self, stage: str, config_hash: str, inputs: Iterable[PathLike] = ()) -> bool:
        """True when the stage already ran with this config on these exact inputs."""
        manifest = self.read_manifest(stage)
        if manifest is None or manifest.config_hash != config_hash:
            return False
        expected = {self._key(p): file_checksum(p) for p in inputs if Path(p).exists()}
        if any(manifest.inputs.get(k) != v for k, v in expected.items()):
            return False
        return not (self._mismatches(manifest.inputs) or self._mismatches(manifest.outputs))

    def status(self) -> Dict[str, Optional[Dict[str, Any]]]:
        out = {}
        for stage in STAGES:
            manifest = self.read_manifest(stage)
            out[stage] = None if manifest is None else {
                "config_hash": manifest.config_hash,
                "finished_at": manifest.finished_at,
                "seconds": manifest.timings.get("total"),
                "outputs": sorted(manifest.outputs),
            }
        return out
