"""On-disk artifact format shared by every stage.

An artifact directory holds a ``manifest.json`` plus flat little-endian binary
tables: ``<f4`` for real vectors (``<f8`` only for float64 checkpoints) and
``<u8`` for ids. The manifest lists each table with its dtype, shape and
sha256, so loading can verify integrity.
"""
from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path
from typing import Any

import numpy as np

FLOAT = np.dtype("<f4")
DOUBLE = np.dtype("<f8")
ID = np.dtype("<u8")

MANIFEST = "manifest.json"


class ArtifactError(RuntimeError):
    """Missing, corrupt or mismatched artifact."""


def array_checksum(arr: np.ndarray) -> str:
    arr = np.ascontiguousarray(arr)
    h = hashlib.sha256()
    h.update(str(arr.dtype.str).encode())
    h.update(str(arr.shape).encode())
    h.update(arr.tobytes())
    return h.hexdigest()


def file_checksum(path: str | os.PathLike) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _disk_dtype(arr: np.ndarray) -> np.dtype:
    if arr.dtype.kind in "iub":
        return ID
    if arr.dtype == np.float64:
        return DOUBLE
    return FLOAT


def write_tables(directory: str | os.PathLike, tables: dict[str, np.ndarray],
                 meta: dict[str, Any]) -> Path:
    """Write ``tables`` as ``<name>.bin`` files plus a manifest carrying ``meta``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = {}
    for name, arr in tables.items():
        arr = np.asarray(arr)
        dtype = _disk_dtype(arr)
        if dtype == ID and arr.size and arr.min() < 0:
            raise ArtifactError(f"table {name}: negative ids cannot be stored as uint64")
        data = np.ascontiguousarray(arr.astype(dtype, copy=False))
        path = directory / f"{name}.bin"
        data.tofile(path)
        entries[name] = {
            "file": path.name,
            "dtype": dtype.str,
            "shape": list(data.shape),
            "sha256": file_checksum(path),
        }
    manifest = dict(meta)
    manifest["tables"] = entries
    write_json(directory / MANIFEST, manifest)
    return directory


def read_manifest(directory: str | os.PathLike) -> dict[str, Any]:
    path = Path(directory) / MANIFEST
    if not path.exists():
        raise ArtifactError(f"missing manifest: {path}")
    with open(path) as fh:
        return json.load(fh)


def read_tables(directory: str | os.PathLike, verify: bool = True
                ) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    directory = Path(directory)
    manifest = read_manifest(directory)
    tables = {}
    for name, entry in manifest.get("tables", {}).items():
        path = directory / entry["file"]
        if not path.exists():
            raise ArtifactError(f"missing table file: {path}")
        if verify and file_checksum(path) != entry["sha256"]:
            raise ArtifactError(f"checksum mismatch: {path}")
        arr = np.fromfile(path, dtype=np.dtype(entry["dtype"]))
        arr = arr.reshape(entry["shape"])
        if arr.dtype == ID:
            arr = arr.astype(np.int64)
        elif arr.dtype.byteorder not in ("=", "|"):
            arr = arr.astype(arr.dtype.newbyteorder("="))
        tables[name] = arr
    return tables, manifest


def write_json(path: str | os.PathLike, payload: Any) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def directory_checksums(directory: str | os.PathLike) -> dict[str, str]:
    """sha256 of every regular file below ``directory`` keyed by relative path."""
    directory = Path(directory)
    return {
        str(p.relative_to(directory)): file_checksum(p)
        for p in sorted(directory.rglob("*")) if p.is_file()
    }
