"""
Functional datasets sampled on a (meridional θ, circumferential φ) surface grid.

On disk a dataset is a directory holding `manifest.json` plus either one matrix file per
function (`.npy` or `.csv`, row-major, n_meridional rows) or one consolidated `values.npz`
container. See docs/FORMATS.md for the byte-level layout.
"""
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .config import logger
from .errors import ValidationError
from .utils import PathLike, savez_atomic, write_json_atomic

MANIFEST_NAME = "manifest.json"
DATASET_FORMAT = "semifmm-dataset"
DATASET_FORMAT_VERSION = 1
CONTAINER_NAME = "values.npz"


@dataclass(frozen=True)
class SurfaceGrid:
    n_meridional: int
    n_circumferential: int
    theta_range: Tuple[float, float] = (9.0, 24.0)
    phi_range: Tuple[float, float] = (0.0, 360.0)

    def __post_init__(self):
        if self.n_meridional < 8 or self.n_circumferential < 8:
            raise ValidationError(
                f"grid needs at least 8 points per direction, got "
                f"{self.n_meridional}x{self.n_circumferential}",
                code="grid_too_small",
            )
        if not self.theta_range[0] < self.theta_range[1]:
            raise ValidationError(f"empty meridional range {self.theta_range}")

    @property
    def size(self) -> int:
        return self.n_meridional * self.n_circumferential

    @property
    def shape(self) -> Tuple[int, int]:
        return (self.n_meridional, self.n_circumferential)

    def theta(self) -> np.ndarray:
        return np.linspace(self.theta_range[0], self.theta_range[1], self.n_meridional)

    def phi(self) -> np.ndarray:
        # circular: the end point coincides with the start point and is not sampled
        width = self.phi_range[1] - self.phi_range[0]
        return self.phi_range[0] + width * np.arange(self.n_circumferential) / self.n_circumferential

    def flat_index(self, i_theta: int, i_phi: int) -> int:
        return int(i_theta) * self.n_circumferential + int(i_phi)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "n_meridional": self.n_meridional,
            "n_circumferential": self.n_circumferential,
            "theta_range": list(self.theta_range),
            "phi_range": list(self.phi_range),
        }

    @classmethod
    def from_dict(cls, payload: Dict[str, Any]) -> "SurfaceGrid":
        try:
            return cls(
                n_meridional=int(payload["n_meridional"]),
                n_circumferential=int(payload["n_circumferential"]),
                theta_range=tuple(float(v) for v in payload.get("theta_range", (9.0, 24.0))),
                phi_range=tuple(float(v) for v in payload.get("phi_range", (0.0, 360.0))),
            )
        except KeyError as e:
            raise ValidationError(f"grid descriptor is missing {e.args[0]!r}", code="missing_metadata")


@dataclass(frozen=True)
class FunctionRecord:
    function_id: str
    subject_id: str
    unit_id: str
    serial_level: float
    covariates: Dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "id": self.function_id,
            "subject": self.subject_id,
            "unit": self.unit_id,
            "serial_level": self.serial_level,
            "covariates": dict(self.covariates),
        }


@dataclass
class FunctionalDataset:
    grid: SurfaceGrid
    records: List[FunctionRecord]
    values: np.ndarray
    serial_name: str = "iop"

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        expected = (len(self.records),) + self.grid.shape
        if self.values.shape != expected:
            raise ValidationError(
                f"values have shape {self.values.shape}, expected {expected}", code="dimension_mismatch"
            )
        _check_finite(self.values, [r.function_id for r in self.records])

    @property
    def n_functions(self) -> int:
        return len(self.records)

    def matrix(self) -> np.ndarray:
        """N x T matrix, each row a function flattened row-major."""
        return self.values.reshape(self.n_functions, -1)

    def serial_levels(self) -> np.ndarray:
        return np.array([r.serial_level for r in self.records], dtype=float)

    def covariate(self, name: str) -> np.ndarray:
        if name == self.serial_name:
            return self.serial_levels()
        try:
            return np.array([float(r.covariates[name]) for r in self.records])
        except KeyError:
            raise ValidationError(f"covariate {name!r} is missing for some functions", code="missing_covariate")

    def labels(self, grouping: str) -> List[str]:
        if grouping in ("unit", "eye"):
            return [r.unit_id for r in self.records]
        if grouping == "subject":
            return [r.subject_id for r in self.records]
        raise ValidationError(f"unknown grouping {grouping!r}", code="unknown_grouping")

    def summary(self) -> Dict[str, Any]:
        levels = sorted({r.serial_level for r in self.records})
        names = sorted({name for r in self.records for name in r.covariates})
        ranges = {}
        for name in names:
            column = self.covariate(name)
            ranges[name] = [float(column.min()), float(column.max())]
        return {
            "n_functions": self.n_functions,
            "grid": self.grid.to_dict(),
            "serial_name": self.serial_name,
            "serial_levels": levels,
            "n_subjects": len({r.subject_id for r in self.records}),
            "n_units": len({r.unit_id for r in self.records}),
            "covariate_ranges": ranges,
        }

    def with_values(self, values: np.ndarray) -> "FunctionalDataset":
        return FunctionalDataset(self.grid, list(self.records), values, self.serial_name)


def _check_finite(values: np.ndarray, ids: Sequence[str]) -> None:
    bad = np.argwhere(~np.isfinite(values))
    if bad.size == 0:
        return
    listed = ", ".join(f"{ids[i]}@({t},{p})" for i, t, p in bad[:10])
    more = f" and {len(bad) - 10} more" if len(bad) > 10 else ""
    raise ValidationError(f"non-finite values at {listed}{more}", code="non_finite")


def _manifest_path(path: PathLike) -> Path:
    candidate = Path(path)
    if candidate.is_dir():
        candidate = candidate / MANIFEST_NAME
    if not candidate.exists():
        raise ValidationError(f"dataset manifest not found: {candidate}", code="missing_manifest")
    return candidate


def _record_from_entry(entry: Dict[str, Any], position: int) -> FunctionRecord:
    missing = [key for key in ("id", "subject", "unit", "serial_level") if key not in entry]
    if missing:
        raise ValidationError(
            f"function entry #{position} is missing {', '.join(missing)}", code="missing_metadata"
        )
    return FunctionRecord(
        function_id=str(entry["id"]),
        subject_id=str(entry["subject"]),
        unit_id=str(entry["unit"]),
        serial_level=float(entry["serial_level"]),
        covariates={k: float(v) for k, v in (entry.get("covariates") or {}).items()},
    )


def _read_matrix(file_path: Path) -> np.ndarray:
    if not file_path.exists():
        raise ValidationError(f"function file not found: {file_path.name}", code="missing_file")
    if file_path.suffix == ".npy":
        return np.load(file_path, allow_pickle=False)
    if file_path.suffix == ".csv":
        return np.loadtxt(file_path, delimiter=",", ndmin=2)
    raise ValidationError(f"unsupported function file type: {file_path.name}", code="bad_format")


def ingest(path: PathLike) -> FunctionalDataset:
    """Load and validate a dataset directory (or its manifest path)."""
    manifest_path = _manifest_path(path)
    root = manifest_path.parent
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ValidationError(f"malformed dataset manifest {manifest_path}: {e}", code="bad_manifest")

    if "grid" not in manifest or "functions" not in manifest:
        raise ValidationError("dataset manifest needs 'grid' and 'functions'", code="missing_metadata")
    grid = SurfaceGrid.from_dict(manifest["grid"])
    entries = manifest["functions"]
    records = [_record_from_entry(entry, i) for i, entry in enumerate(entries)]
    if len({r.function_id for r in records}) != len(records):
        raise ValidationError("duplicate function ids in manifest", code="duplicate_id")

    container = manifest.get("container")
    if container:
        with np.load(root / container, allow_pickle=False) as archive:
            values = np.asarray(archive["values"], dtype=float)
        expected = (len(records),) + grid.shape
        if values.shape != expected:
            raise ValidationError(
                f"{container}: values have shape {values.shape}, expected {expected}",
                code="dimension_mismatch",
            )
    else:
        values = np.empty((len(records),) + grid.shape)
        for i, entry in enumerate(entries):
            if "file" not in entry:
                raise ValidationError(f"function {records[i].function_id} has no file", code="missing_metadata")
            matrix = _read_matrix(root / entry["file"])
            if matrix.shape != grid.shape:
                raise ValidationError(
                    f"{entry['file']}: matrix is {matrix.shape}, grid is {grid.shape}",
                    code="dimension_mismatch",
                )
            values[i] = matrix

    dataset = FunctionalDataset(grid, records, values, serial_name=manifest.get("serial_name", "iop"))
    summary = dataset.summary()
    logger.info(
        f"📥 Ingested {summary['n_functions']} functions on a "
        f"{grid.n_meridional}x{grid.n_circumferential} grid, serial levels {summary['serial_levels']}"
    )
    return dataset


def save_dataset(dataset: FunctionalDataset, directory: PathLike, *, storage: str = "npz") -> List[Path]:
    """Write a dataset directory; returns the files written (manifest last)."""
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    written: List[Path] = []
    entries = []
    manifest: Dict[str, Any] = {
        "format": DATASET_FORMAT,
        "version": DATASET_FORMAT_VERSION,
        "grid": dataset.grid.to_dict(),
        "serial_name": dataset.serial_name,
    }
    if storage == "npz":
        savez_atomic(root / CONTAINER_NAME, values=dataset.values)
        written.append(root / CONTAINER_NAME)
        manifest["container"] = CONTAINER_NAME
        entries = [r.to_dict() for r in dataset.records]
    elif storage in ("npy", "csv"):
        for i, record in enumerate(dataset.records):
            file_name = f"f{i:05d}.{storage}"
            target = root / file_name
            if storage == "npy":
                np.save(target, dataset.values[i], allow_pickle=False)
            else:
                np.savetxt(target, dataset.values[i], delimiter=",", fmt="%.17g")
            written.append(target)
            entries.append({**record.to_dict(), "file": file_name})
    else:
        raise ValidationError(f"unknown storage {storage!r}", code="bad_format")
    manifest["functions"] = entries
    write_json_atomic(root / MANIFEST_NAME, manifest)
    written.append(root / MANIFEST_NAME)
    logger.info(f"💾 Saved {dataset.n_functions} functions to {root} ({storage})")
    return written
