"""DTF1 tensor files and the small ``key=value`` text headers used next to them.

Layout: magic ``DTF1``, u8 dtype code (0 = f32, 1 = f64), u8 rank, ``rank``
little-endian u64 dimensions, then the row-major little-endian payload.
"""

from __future__ import annotations

import os
import struct

import numpy as np

from .errors import ManifestError, UnsupportedFormatError

MAGIC = b"DTF1"
_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


def write_tensor(path, array) -> None:
    arr = np.asarray(array)
    if arr.dtype == np.float32:
        code = 0
    else:
        code = 1
        arr = arr.astype(np.float64, copy=False)
    dtype = _CODES[code]
    header = MAGIC + struct.pack("<BB", code, arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(arr, dtype=dtype).tobytes())


def read_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 6 or blob[:4] != MAGIC:
        raise UnsupportedFormatError(f"{path}: not a DTF1 tensor file")
    code, rank = struct.unpack_from("<BB", blob, 4)
    if code not in _CODES:
        raise UnsupportedFormatError(f"{path}: unknown dtype code {code}")
    offset = 6 + 8 * rank
    if len(blob) < offset:
        raise UnsupportedFormatError(f"{path}: truncated header")
    shape = struct.unpack_from(f"<{rank}Q", blob, 6)
    dtype = _CODES[code]
    count = int(np.prod(shape, dtype=np.int64))
    if len(blob) - offset != count * dtype.itemsize:
        raise UnsupportedFormatError(f"{path}: payload size does not match shape {shape}")
    return np.frombuffer(blob, dtype=dtype, offset=offset).reshape(shape).astype(dtype.newbyteorder("="))


def write_header(path, fields: dict) -> None:
    lines = [f"{k}={v}" for k, v in fields.items()]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def read_header(path) -> dict[str, str]:
    if not os.path.exists(path):
        raise ManifestError(f"missing header file {path}")
    fields = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, value = line.partition("=")
            if not sep or not key.strip():
                raise ManifestError(f"{path}:{lineno}: expected key=value, got {line!r}")
            fields[key.strip()] = value.strip()
    return fields
