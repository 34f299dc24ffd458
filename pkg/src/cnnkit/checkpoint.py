"""Checkpoint archive: named little-endian tensor records plus a JSON manifest.

Layout (a zip file, stored uncompressed):

``manifest.json``
    ``{"format": "cnnkit-checkpoint", "version": 1, "model_spec_hash": str,
    "records": [{"name", "dtype", "shape", "offset", "nbytes"}, ...], "meta": {...}}``
``payload.bin``
    the concatenated record payloads, each in little-endian byte order.
"""

from __future__ import annotations

import json
import zipfile
from pathlib import Path

import numpy as np

FORMAT = "cnnkit-checkpoint"
VERSION = 1
_DTYPES = {"float32", "float64", "int64", "int32", "uint32", "uint8", "bool"}


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, tensors: dict[str, np.ndarray], model_spec_hash: str = "",
                    meta: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    records, chunks, offset = [], [], 0
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        if arr.dtype.name not in _DTYPES:
            raise CheckpointError(f"record {name!r}: unsupported dtype {arr.dtype}")
        buf = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes()
        records.append({"name": name, "dtype": arr.dtype.name, "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(buf)})
        chunks.append(buf)
        offset += len(buf)
    manifest = {"format": FORMAT, "version": VERSION, "model_spec_hash": model_spec_hash,
                "records": records, "meta": meta or {}}
    tmp = path.with_suffix(path.suffix + ".tmp")
    with zipfile.ZipFile(tmp, "w", compression=zipfile.ZIP_STORED) as zf:
        zf.writestr("manifest.json", json.dumps(manifest, indent=1, sort_keys=True))
        zf.writestr("payload.bin", b"".join(chunks))
    tmp.replace(path)
    return path


def read_manifest(path) -> dict:
    with zipfile.ZipFile(path) as zf:
        manifest = json.loads(zf.read("manifest.json"))
    if manifest.get("format") != FORMAT:
        raise CheckpointError(f"{path}: not a {FORMAT} archive")
    return manifest


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    with zipfile.ZipFile(path) as zf:
        manifest = json.loads(zf.read("manifest.json"))
        payload = zf.read("payload.bin")
    if manifest.get("format") != FORMAT:
        raise CheckpointError(f"{path}: not a {FORMAT} archive")
    tensors = {}
    for rec in manifest["records"]:
        dt = np.dtype(rec["dtype"]).newbyteorder("<")
        raw = payload[rec["offset"]: rec["offset"] + rec["nbytes"]]
        arr = np.frombuffer(raw, dtype=dt).reshape(rec["shape"])
        tensors[rec["name"]] = arr.astype(arr.dtype.newbyteorder("="), copy=True)
    return tensors, manifest
