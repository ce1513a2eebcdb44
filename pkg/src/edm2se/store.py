"""Parameter blob format and the on-disk snapshot store.

Blob layout (little-endian)::

    b"EDM2SE01"  u32 tensor_count
    per tensor:  u16 name_len, name (utf-8), u8 ndim, u32 dims[ndim], float32 payload
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"EDM2SE01"
INDEX_NAME = "index.json"


def save_params(path, params: dict[str, np.ndarray]):
    path = Path(path)
    chunks = [MAGIC, struct.pack("<I", len(params))]
    for name, arr in params.items():
        # np.ascontiguousarray would promote 0-d scalars to shape (1,)
        arr = np.asarray(arr, dtype="<f4")
        key = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(key)) + key)
        chunks.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes(order="C"))
    tmp = path.with_name(path.name + ".tmp")
    try:
        with open(tmp, "wb") as fh:
            fh.write(b"".join(chunks))
        os.replace(tmp, path)
    except OSError as exc:
        raise OSError(f"failed to write parameter file {path}: {exc}") from exc


def load_params(path) -> dict[str, np.ndarray]:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise OSError(f"failed to read parameter file {path}: {exc}") from exc
    if buf[:8] != MAGIC:
        raise ValueError(f"{path}: not an EDM2SE01 parameter file")
    (count,) = struct.unpack_from("<I", buf, 8)
    pos = 12
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        name = buf[pos : pos + nlen].decode("utf-8")
        pos += nlen
        (ndim,) = struct.unpack_from("<B", buf, pos)
        pos += 1
        dims = struct.unpack_from(f"<{ndim}I", buf, pos)
        pos += 4 * ndim
        n = int(np.prod(dims)) if ndim else 1
        out[name] = np.frombuffer(buf, dtype="<f4", count=n, offset=pos).reshape(dims).astype(np.float32)
        pos += 4 * n
    if pos != len(buf):
        raise ValueError(f"{path}: {len(buf) - pos} trailing bytes")
    return out


def trace_label(trace) -> str:
    return "raw" if trace == "raw" else f"ema{float(trace):g}"


@dataclass(frozen=True)
class SnapshotRecord:
    step: int
    trace: object  # "raw" or the power-law exponent (float)
    file: str

    @property
    def is_raw(self) -> bool:
        return self.trace == "raw"

    def to_json(self):
        return {"step": self.step, "trace": self.trace, "file": self.file}


class SnapshotStore:
    """Directory of parameter blobs plus a JSON index of ``{step, trace, file}`` records."""

    def __init__(self, root):
        self.root = Path(root)
        self.records: list[SnapshotRecord] = []
        index = self.root / INDEX_NAME
        if index.exists():
            for r in json.loads(index.read_text()):
                trace = r["trace"] if r["trace"] == "raw" else float(r["trace"])
                self.records.append(SnapshotRecord(int(r["step"]), trace, r["file"]))

    @classmethod
    def create(cls, root) -> "SnapshotStore":
        root = Path(root)
        root.mkdir(parents=True, exist_ok=True)
        store = cls(root)
        store.records = []
        store._write_index()
        return store

    def _write_index(self):
        text = json.dumps([r.to_json() for r in self.records], indent=1)
        (self.root / INDEX_NAME).write_text(text + "\n")

    def add(self, step: int, trace, params: dict[str, np.ndarray]) -> SnapshotRecord:
        trace = "raw" if trace == "raw" else float(trace)
        prev = [r.step for r in self.records if r.trace == trace]
        if prev and step <= max(prev):
            raise ValueError(f"snapshot steps must increase per trace: {step} after {max(prev)} ({trace})")
        fname = f"{trace_label(trace)}-{step:08d}.bin"
        save_params(self.root / fname, params)
        rec = SnapshotRecord(int(step), trace, fname)
        self.records.append(rec)
        self._write_index()
        return rec

    def load(self, record: SnapshotRecord) -> dict[str, np.ndarray]:
        return load_params(self.root / record.file)

    def traces(self) -> list:
        seen = []
        for r in self.records:
            if r.trace not in seen:
                seen.append(r.trace)
        return seen

    def select(self, trace=None) -> list[SnapshotRecord]:
        recs = self.records if trace is None else [r for r in self.records if r.trace == trace]
        return sorted(recs, key=lambda r: (str(r.trace), r.step))

    def ema_records(self) -> list[SnapshotRecord]:
        return [r for r in self.select() if not r.is_raw]

    def latest_raw(self) -> SnapshotRecord:
        raws = self.select("raw")
        if not raws:
            raise ValueError(f"store {self.root} has no raw snapshots")
        return raws[-1]

    def __len__(self):
        return len(self.records)
