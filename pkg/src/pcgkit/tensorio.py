"""Portable binary tensor files: magic PCGT, f32 payload, little-endian."""

import struct

import numpy as np

from .errors import DataError

_MAGIC = b"PCGT"
_VERSION = 1
_DTYPE_F32 = 0


def save_tensor(path, array: np.ndarray) -> None:
    """Write an array as a PCGT file (f32, row-major, little-endian dims)."""
    arr = np.ascontiguousarray(array, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<BBB", _VERSION, _DTYPE_F32, arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(arr.tobytes())


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4 or raw[:4] != _MAGIC:
        raise DataError(f"{path}: not a tensor file")
    if len(raw) < 7:
        raise DataError(f"{path}: unexpected end of file")
    version, dtype_code, rank = struct.unpack_from("<BBB", raw, 4)
    if version != _VERSION:
        raise DataError(f"{path}: unsupported tensor version {version}")
    if dtype_code != _DTYPE_F32:
        raise DataError(f"{path}: unsupported dtype code {dtype_code}")
    pos = 7
    if len(raw) < pos + 4 * rank:
        raise DataError(f"{path}: unexpected end of file")
    dims = struct.unpack_from(f"<{rank}I", raw, pos)
    pos += 4 * rank
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    need = pos + 4 * count
    if len(raw) < need:
        raise DataError(f"{path}: unexpected end of file")
    if len(raw) > need:
        raise DataError(f"{path}: {len(raw) - need} trailing bytes")
    flat = np.frombuffer(raw[pos:need], dtype="<f4")
    return flat.reshape(dims).copy()


def write_sidecar(path, fields: dict) -> None:
    """Write metadata as a single `key=value,key=value` line next to a tensor."""
    line = ",".join(f"{k}={v}" for k, v in fields.items())
    with open(f"{path}.meta", "w", encoding="utf-8") as fh:
        fh.write(line + "\n")


def read_sidecar(path) -> dict:
    with open(f"{path}.meta", "r", encoding="utf-8") as fh:
        line = fh.readline().strip()
    fields = {}
    for part in line.split(","):
        if part:
            k, _, v = part.partition("=")
            fields[k] = v
    return fields
