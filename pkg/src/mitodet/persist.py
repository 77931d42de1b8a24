"""Flat binary weight checkpoints, metrics logs and prototype traces.

Checkpoint layout, all integers little-endian uint32:

    magic b"MDW1" | version | tensor count
    per tensor: name length | name (utf-8) | ndim | dims | float64 data (LE)

Tensors are written in insertion order of the mapping, so identical
parameter dicts produce identical files.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"MDW1"
VERSION = 1


class CheckpointError(RuntimeError):
    """Raised on malformed or truncated checkpoint files."""


def save_tensors(named: dict, path: Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    chunks = [MAGIC, struct.pack("<II", VERSION, len(named))]
    for name, value in named.items():
        # asarray, not ascontiguousarray: the latter silently promotes
        # 0-d arrays (the fusion gates) to shape (1,).  tobytes below
        # copies into C order on its own.
        data = np.asarray(value, dtype=np.float64)
        raw_name = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw_name)))
        chunks.append(raw_name)
        chunks.append(struct.pack("<I", data.ndim))
        chunks.append(struct.pack(f"<{data.ndim}I", *data.shape))
        chunks.append(data.astype("<f8").tobytes())
    path.write_bytes(b"".join(chunks))


def load_tensors(path: Path) -> dict:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a weight checkpoint")
    version, count = struct.unpack_from("<II", raw, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    pos = 12
    out: dict = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", raw, pos)
            pos += 4
            name = raw[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (ndim,) = struct.unpack_from("<I", raw, pos)
            pos += 4
            shape = struct.unpack_from(f"<{ndim}I", raw, pos)
            pos += 4 * ndim
            size = int(np.prod(shape)) if ndim else 1
            data = np.frombuffer(raw, dtype="<f8", count=size, offset=pos)
            pos += 8 * size
            out[name] = data.reshape(shape).astype(np.float64)
    except (struct.error, ValueError) as exc:
        raise CheckpointError(f"{path}: truncated checkpoint") from exc
    if pos != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - pos} trailing bytes")
    return out


def digest(arrays: list) -> str:
    """sha256 over the concatenated float64 bytes of ``arrays``."""
    h = hashlib.sha256()
    for a in arrays:
        h.update(np.ascontiguousarray(np.asarray(a, dtype=np.float64)).tobytes())
    return h.hexdigest()


class MetricsLog:
    """Line-delimited JSON metrics, one object per appended record."""

    def __init__(self, path: Path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = open(self.path, "w")

    def append(self, record: dict) -> None:
        self._fh.write(json.dumps(record, sort_keys=True) + "\n")
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_metrics(path: Path) -> list:
    lines = Path(path).read_text().splitlines()
    return [json.loads(line) for line in lines if line.strip()]


def write_prototype_trace(rows: list, path: Path) -> None:
    """CSV of prototype positions: step, head, index, then coordinates."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        fh.write("step,head,index,coords\n")
        for step, head, index, coords in rows:
            joined = ";".join(f"{c:.17g}" for c in coords)
            fh.write(f"{step},{head},{index},{joined}\n")
