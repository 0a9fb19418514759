"""Index file format.

Layout (little-endian): magic ``PFIX``, u16 version, u8 backend tag,
u32-length JSON params block, record table (u32 N, u32 image count, per
image u16 length + utf-8 id, int32 image index[N], int32 keypoint
ordinal[N]) and the backend payload (u16 array count, then per array a
name, dtype string, shape and raw bytes).
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from ..errors import FormatError, ImageIOError, VersionMismatch
from .base import ANNIndex, RecordTable

MAGIC = b"PFIX"
VERSION = 1


def _write_str(fh, s: str, fmt: str = "<H") -> None:
    raw = s.encode("utf-8")
    fh.write(struct.pack(fmt, len(raw)))
    fh.write(raw)


def _read_exact(fh, n: int) -> bytes:
    raw = fh.read(n)
    if len(raw) != n:
        raise FormatError("truncated index file")
    return raw


def _read_str(fh, fmt: str = "<H") -> str:
    (n,) = struct.unpack(fmt, _read_exact(fh, struct.calcsize(fmt)))
    return _read_exact(fh, n).decode("utf-8")


def _write_array(fh, name: str, arr: np.ndarray) -> None:
    arr = np.ascontiguousarray(arr)
    arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
    _write_str(fh, name)
    _write_str(fh, arr.dtype.str, "<B")
    fh.write(struct.pack("<B", arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    fh.write(arr.tobytes())


def _read_array(fh) -> tuple[str, np.ndarray]:
    name = _read_str(fh)
    dtype = np.dtype(_read_str(fh, "<B"))
    (ndim,) = struct.unpack("<B", _read_exact(fh, 1))
    shape = struct.unpack(f"<{ndim}Q", _read_exact(fh, 8 * ndim))
    count = int(np.prod(shape, dtype=np.int64))
    arr = np.frombuffer(_read_exact(fh, count * dtype.itemsize), dtype=dtype).reshape(shape)
    return name, arr.astype(dtype.newbyteorder("="), copy=True)


def save_index(index: ANNIndex, path) -> None:
    path = Path(path)
    if not path.parent.is_dir():
        raise ImageIOError(f"directory does not exist: {path.parent}")
    meta = {
        "params": index.params,
        "seed": index.seed,
        "epsilon": index.epsilon,
        "build_seconds": index.build_seconds,
    }
    rec = index.records
    try:
        with open(path, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<HB", VERSION, index.tag))
            _write_str(fh, json.dumps(meta, sort_keys=True), "<I")
            fh.write(struct.pack("<II", len(rec), len(rec.image_names)))
            for name in rec.image_names:
                _write_str(fh, name)
            fh.write(rec.image_index.astype("<i4").tobytes())
            fh.write(rec.ordinals.astype("<i4").tobytes())
            arrays = index.arrays()
            fh.write(struct.pack("<H", len(arrays)))
            for name in sorted(arrays):
                _write_array(fh, name, arrays[name])
    except OSError as exc:
        raise ImageIOError(str(exc)) from exc


def load_index(path) -> ANNIndex:
    from .backends import BACKEND_BY_TAG

    path = Path(path)
    try:
        fh = open(path, "rb")
    except OSError as exc:
        raise ImageIOError(str(exc)) from exc
    with fh:
        if fh.read(4) != MAGIC:
            raise VersionMismatch(f"{path} is not an index file")
        version, tag = struct.unpack("<HB", _read_exact(fh, 3))
        if version != VERSION:
            raise VersionMismatch(f"index version {version}, expected {VERSION}")
        if tag not in BACKEND_BY_TAG:
            raise VersionMismatch(f"unknown backend tag {tag}")
        meta = json.loads(_read_str(fh, "<I"))
        n, n_names = struct.unpack("<II", _read_exact(fh, 8))
        names = [_read_str(fh) for _ in range(n_names)]
        image_index = np.frombuffer(_read_exact(fh, 4 * n), dtype="<i4").astype(np.int32)
        ordinals = np.frombuffer(_read_exact(fh, 4 * n), dtype="<i4").astype(np.int32)
        (n_arrays,) = struct.unpack("<H", _read_exact(fh, 2))
        arrays = dict(_read_array(fh) for _ in range(n_arrays))
    cls = BACKEND_BY_TAG[tag]
    vectors = arrays.get("vectors", arrays.get("rerank_vectors"))
    records = RecordTable(vectors, names, image_index, ordinals)
    index = cls(records, meta["params"], meta["seed"], meta["epsilon"])
    index.build_seconds = meta["build_seconds"]
    index.restore(arrays)
    return index
