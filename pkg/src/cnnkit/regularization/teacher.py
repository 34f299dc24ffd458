"""Offline teacher logits: a length-prefixed record file plus a JSON manifest.

Record layout (little-endian), repeated ``count`` times::

    u32 id_length | id bytes (UTF-8) | u32 K | K x float32 logits

The manifest sits next to the record file as ``<path>.json``::

    {"format": "cnnkit-teacher-logits", "version": 1, "teacher": str,
     "num_classes": K, "count": int, "dtype": "float32", "sha256": hex digest of the record file}
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

FORMAT = "cnnkit-teacher-logits"


class TeacherStoreError(ValueError):
    pass


class TeacherLogitStore:
    def __init__(self, logits: dict[str, np.ndarray], num_classes: int, teacher: str = ""):
        self.num_classes = int(num_classes)
        self.teacher = teacher
        self._logits = {}
        for sid, row in logits.items():
            row = np.asarray(row, dtype=np.float32)
            if row.shape != (self.num_classes,):
                raise TeacherStoreError(f"sample {sid!r}: logits shape {row.shape} != ({self.num_classes},)")
            self._logits[str(sid)] = row

    def __len__(self) -> int:
        return len(self._logits)

    def __contains__(self, sid) -> bool:
        return str(sid) in self._logits

    def ids(self) -> list[str]:
        return list(self._logits)

    def lookup(self, ids) -> np.ndarray:
        rows = []
        for sid in ids:
            key = str(sid)
            if key not in self._logits:
                raise TeacherStoreError(f"teacher logits missing for sample id {key!r}")
            rows.append(self._logits[key])
        return np.stack(rows) if rows else np.zeros((0, self.num_classes), np.float32)

    def validate(self, ids, num_classes: int) -> None:
        """Check the store covers every id exactly and matches the model's class count."""
        if num_classes != self.num_classes:
            raise TeacherStoreError(f"teacher has {self.num_classes} classes but the model has {num_classes}")
        wanted = [str(i) for i in ids]
        missing = [i for i in wanted if i not in self._logits]
        if missing:
            raise TeacherStoreError(f"teacher logits missing for sample id {missing[0]!r} "
                                    f"({len(missing)} missing)")
        if len(set(wanted)) != len(wanted):
            raise TeacherStoreError("dataset ids are not unique")

    # -- persistence ----------------------------------------------------------
    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        chunks = []
        for sid, row in self._logits.items():
            b = sid.encode("utf-8")
            chunks.append(struct.pack("<I", len(b)) + b + struct.pack("<I", self.num_classes)
                          + row.astype("<f4").tobytes())
        payload = b"".join(chunks)
        path.write_bytes(payload)
        manifest = {"format": FORMAT, "version": 1, "teacher": self.teacher,
                    "num_classes": self.num_classes, "count": len(self._logits), "dtype": "float32",
                    "sha256": hashlib.sha256(payload).hexdigest()}
        Path(str(path) + ".json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
        return path

    @classmethod
    def load(cls, path) -> "TeacherLogitStore":
        path = Path(path)
        mpath = Path(str(path) + ".json")
        if not path.exists() or not mpath.exists():
            raise TeacherStoreError(f"teacher store {path} or its manifest is missing")
        manifest = json.loads(mpath.read_text())
        if manifest.get("format") != FORMAT:
            raise TeacherStoreError(f"{mpath}: not a {FORMAT} manifest")
        payload = path.read_bytes()
        if hashlib.sha256(payload).hexdigest() != manifest["sha256"]:
            raise TeacherStoreError(f"{path}: checksum does not match the manifest")
        k = int(manifest["num_classes"])
        logits, off = {}, 0
        while off < len(payload):
            (n,) = struct.unpack_from("<I", payload, off)
            off += 4
            sid = payload[off:off + n].decode("utf-8")
            off += n
            (kk,) = struct.unpack_from("<I", payload, off)
            off += 4
            if kk != k:
                raise TeacherStoreError(f"record {sid!r} has {kk} logits, manifest says {k}")
            if sid in logits:
                raise TeacherStoreError(f"sample id {sid!r} appears twice")
            logits[sid] = np.frombuffer(payload, dtype="<f4", count=k, offset=off).astype(np.float32)
            off += 4 * k
        if len(logits) != manifest["count"]:
            raise TeacherStoreError(f"{path}: {len(logits)} records, manifest says {manifest['count']}")
        return cls(logits, k, manifest.get("teacher", ""))
