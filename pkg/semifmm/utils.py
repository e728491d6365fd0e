import hashlib
import json
import os
import tempfile
import zipfile
from pathlib import Path
from typing import Any, Dict, Iterable, Union

import numpy as np

PathLike = Union[str, Path]
_ZIP_EPOCH = (1980, 1, 1, 0, 0, 0)


def _same_dir_temp(destination: Path, suffix: str) -> Path:
    destination.parent.mkdir(parents=True, exist_ok=True)
    fd, temp_name = tempfile.mkstemp(
        prefix=f".{destination.name}.{os.getpid()}.",
        suffix=suffix,
        dir=destination.parent,
    )
    os.close(fd)
    return Path(temp_name)


def write_json_atomic(path: PathLike, payload: Any) -> None:
    """Write JSON to a file atomically using a same-directory temp file."""
    destination = Path(path)
    temp_path = _same_dir_temp(destination, ".tmp")
    try:
        temp_path.write_text(json.dumps(payload, indent=2, sort_keys=True, default=_json_default), encoding="utf-8")
        os.replace(temp_path, destination)
    finally:
        if temp_path.exists():
            temp_path.unlink(missing_ok=True)


def write_text_atomic(path: PathLike, text: str) -> None:
    destination = Path(path)
    temp_path = _same_dir_temp(destination, ".tmp")
    try:
        temp_path.write_text(text, encoding="utf-8")
        os.replace(temp_path, destination)
    finally:
        if temp_path.exists():
            temp_path.unlink(missing_ok=True)


def savez_atomic(path: PathLike, **arrays: np.ndarray) -> None:
    """Write an uncompressed .npz container atomically.

    Zip entries carry a fixed timestamp so identical arrays give identical bytes.
    """
    destination = Path(path)
    temp_path = _same_dir_temp(destination, ".npz")
    try:
        with zipfile.ZipFile(temp_path, "w", compression=zipfile.ZIP_STORED, allowZip64=True) as archive:
            for name, value in arrays.items():
                info = zipfile.ZipInfo(f"{name}.npy", date_time=_ZIP_EPOCH)
                with archive.open(info, "w", force_zip64=True) as handle:
                    np.lib.format.write_array(handle, np.asanyarray(value), allow_pickle=False)
        os.replace(temp_path, destination)
    finally:
        if temp_path.exists():
            temp_path.unlink(missing_ok=True)


def file_checksum(path: PathLike) -> str:
    """sha256 of a file's bytes."""
    digest = hashlib.sha256()
    with Path(path).open("rb") as handle:
        for chunk in iter(lambda: handle.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def checksums(paths: Iterable[PathLike]) -> Dict[str, str]:
    return {Path(p).name: file_checksum(p) for p in sorted(paths, key=lambda p: Path(p).name)}


def payload_hash(payload: Any) -> str:
    """sha256 of canonical (sorted, compact) JSON."""
    canonical = json.dumps(payload, sort_keys=True, separators=(",", ":"), default=_json_default)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def _json_default(value: Any) -> Any:
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, Path):
        return str(value)
    raise TypeError(f"Object of type {type(value).__name__} is not JSON serializable")


__all__ = [
    "checksums",
    "file_checksum",
    "payload_hash",
    "savez_atomic",
    "write_json_atomic",
    "write_text_atomic",
]
