"""Manifest + flat float32 array container.

One binary format backs both latent export files and flow/policy
checkpoints: an 8-byte magic, a little-endian uint32 header length, a JSON
manifest, then the named arrays as raw 32-bit IEEE-754 little-endian data.
Round-trip of float32 data is bit-exact.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

MAGIC = b"RLFRAR01"
FORMAT_VERSION = 1


def save_arrays(path: str | Path, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    entries = []
    blobs = []
    offset = 0
    for name, arr in arrays.items():
        data = np.ascontiguousarray(arr, dtype="<f4")
        entries.append({"name": name, "shape": list(data.shape), "offset": offset})
        blob = data.tobytes()
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps(
        {"version": FORMAT_VERSION, "meta": meta, "arrays": entries},
        sort_keys=True,
    ).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(np.uint32(len(header)).tobytes())
        f.write(header)
        for blob in blobs:
            f.write(blob)


def load_arrays(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as f:
        magic = f.read(8)
        if magic != MAGIC:
            raise ValueError(f"{path}: not an RLFR array file (magic {magic!r})")
        (header_len,) = np.frombuffer(f.read(4), dtype="<u4")
        header = json.loads(f.read(int(header_len)).decode("utf-8"))
        if header["version"] != FORMAT_VERSION:
            raise ValueError(f"unsupported format version {header['version']}")
        payload = f.read()
    arrays = {}
    for entry in header["arrays"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=start)
        arrays[entry["name"]] = arr.reshape(shape).copy()
    return header["meta"], arrays
