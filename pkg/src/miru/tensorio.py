"""Binary container for named tensors (checkpoints and optimizer state).

Layout, all integers little-endian::

    8 bytes   magic b"MIRUTNSR"
    4 bytes   uint32 header length H
    H bytes   UTF-8 JSON header; header["tensors"] lists
              {"name", "shape", "dtype"} in storage order
    ...       each tensor's raw data, row-major, little-endian,
              concatenated in the order listed

``dtype`` is ``"f4"`` or ``"f8"`` (``"i8"`` for integer state).
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"MIRUTNSR"
FORMAT_VERSION = 1


class TensorFileError(ValueError):
    pass


def write_tensors(path, header: dict, tensors: dict[str, np.ndarray]) -> None:
    header = dict(header)
    header.setdefault("format_version", FORMAT_VERSION)
    table = []
    blobs = []
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        code = arr.dtype.kind + str(arr.dtype.itemsize)
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        table.append({"name": name, "shape": list(arr.shape), "dtype": code})
        blobs.append(np.ascontiguousarray(le).tobytes())
    header["tensors"] = table
    raw = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(raw)))
        f.write(raw)
        for blob in blobs:
            f.write(blob)


def read_tensors(path) -> tuple[dict, dict[str, np.ndarray]]:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise TensorFileError(f"{path}: not a tensor file")
    (n,) = struct.unpack("<I", data[8:12])
    header = json.loads(data[12:12 + n])
    if header.get("format_version") != FORMAT_VERSION:
        raise TensorFileError(f"{path}: unsupported format version "
                              f"{header.get('format_version')}")
    offset = 12 + n
    tensors = {}
    for entry in header["tensors"]:
        dt = np.dtype("<" + entry["dtype"])
        count = int(np.prod(entry["shape"], dtype=np.int64))
        end = offset + count * dt.itemsize
        if end > len(data):
            raise TensorFileError(f"{path}: truncated at tensor {entry['name']!r}")
        arr = np.frombuffer(data, dtype=dt, count=count, offset=offset)
        tensors[entry["name"]] = arr.reshape(entry["shape"]).astype(dt.newbyteorder("="))
        offset = end
    return header, tensors
