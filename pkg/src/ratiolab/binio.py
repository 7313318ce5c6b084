"""Versioned little-endian container for named arrays plus a JSON header.

Layout::

    magic        4 bytes   (b"RRCK" checkpoint, b"RRBF" replay snapshot)
    version      uint32 LE
    header_len   uint32 LE
    header       UTF-8 JSON, ``{"meta": {...}, "arrays": [{"name", "dtype", "shape", "nbytes"}, ...]}``
    payload      array bytes, in manifest order, each C-contiguous little-endian
"""
from __future__ import annotations

import io
import json
import struct

import numpy as np

FORMAT_VERSION = 1


class FormatError(ValueError):
    pass


def _le(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    return a.astype(a.dtype.newbyteorder("<"), copy=False)


def dumps(magic: bytes, meta: dict, arrays: dict[str, np.ndarray]) -> bytes:
    manifest, chunks = [], []
    for name, a in arrays.items():
        a = _le(np.asarray(a))
        manifest.append({"name": name, "dtype": a.dtype.str, "shape": list(a.shape), "nbytes": a.nbytes})
        chunks.append(a.tobytes())
    header = json.dumps({"meta": meta, "arrays": manifest}, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(magic)
    buf.write(struct.pack("<II", FORMAT_VERSION, len(header)))
    buf.write(header)
    for c in chunks:
        buf.write(c)
    return buf.getvalue()


def loads(magic: bytes, data: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if data[:4] != magic:
        raise FormatError(f"bad magic {data[:4]!r}, expected {magic!r}")
    version, hlen = struct.unpack_from("<II", data, 4)
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported format version {version}")
    header = json.loads(data[12:12 + hlen])
    pos = 12 + hlen
    arrays = {}
    for entry in header["arrays"]:
        n = entry["nbytes"]
        a = np.frombuffer(data[pos:pos + n], dtype=np.dtype(entry["dtype"])).reshape(entry["shape"])
        arrays[entry["name"]] = a.copy()
        pos += n
    if pos != len(data):
        raise FormatError("trailing bytes after payload")
    return header["meta"], arrays
