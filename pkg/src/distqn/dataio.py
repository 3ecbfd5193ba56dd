"""Dataset persistence: the ``DQND`` binary container and a CSV loader.

Binary layout (little-endian)::

    magic  b"DQND"        4 bytes
    version u16           currently 1
    kind    u8            0 logistic, 1 poisson, 2 gaussian
    N       u64
    p       u32
    Y       N float64
    X       N*p float64, row-major
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .models import Dataset, ModelKind

MAGIC = b"DQND"
VERSION = 1
_HEADER = struct.Struct("<4sHBQI")


class DatasetFormatError(ValueError):
    pass


def dataset_to_bytes(ds: Dataset) -> bytes:
    header = _HEADER.pack(MAGIC, VERSION, ds.kind.code, ds.N, ds.p)
    return header + ds.Y.astype("<f8").tobytes() + ds.X.astype("<f8").tobytes()


def dataset_from_bytes(buf: bytes) -> Dataset:
    if len(buf) < _HEADER.size:
        raise DatasetFormatError("truncated header")
    magic, version, kind, N, p = _HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise DatasetFormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise DatasetFormatError(f"unsupported version {version}")
    expected = _HEADER.size + 8 * N * (1 + p)
    if len(buf) != expected:
        raise DatasetFormatError(f"expected {expected} bytes, got {len(buf)}")
    off = _HEADER.size
    Y = np.frombuffer(buf, dtype="<f8", count=N, offset=off).astype(np.float64)
    X = np.frombuffer(buf, dtype="<f8", count=N * p, offset=off + 8 * N).astype(np.float64)
    return Dataset(X.reshape(N, p), Y, ModelKind.from_code(kind))


def save_dataset(ds: Dataset, path) -> None:
    Path(path).write_bytes(dataset_to_bytes(ds))


def load_dataset(path) -> Dataset:
    path = Path(path)
    if path.suffix.lower() in (".csv", ".txt"):
        raise DatasetFormatError(f"{path} looks like text; use load_csv with a model kind")
    return dataset_from_bytes(path.read_bytes())


def load_csv(path, kind) -> Dataset:
    """Read ``y,x1,...,xp`` comma-separated text with a header row."""
    path = Path(path)
    with path.open() as fh:
        header = fh.readline().strip().split(",")
    if not header or header[0].strip() != "y" or len(header) < 2:
        raise DatasetFormatError(f"{path}: header must be y,x1,...,xp")
    raw = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    if raw.shape[1] != len(header):
        raise DatasetFormatError(f"{path}: {raw.shape[1]} columns, header names {len(header)}")
    return Dataset(raw[:, 1:], raw[:, 0], ModelKind(kind))


def save_csv(ds: Dataset, path) -> None:
    header = ",".join(["y"] + [f"x{j + 1}" for j in range(ds.p)])
    np.savetxt(path, np.column_stack([ds.Y, ds.X]), delimiter=",", header=header, comments="",
               fmt="%.17g")
