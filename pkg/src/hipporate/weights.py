"""Flat binary parameter container: a little-endian payload prefixed by a
JSON index (name -> offset/shape/dtype). The index carries a mandatory
format version plus free-form metadata (model card material lives there)."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import FormatError

FORMAT_VERSION = 1
_MAGIC = b"HRWB"
_ALLOWED_DTYPES = {"float32", "float64", "int64"}


def save_weights(path: str | Path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    index = {"version": FORMAT_VERSION, "meta": meta or {}, "tensors": {}}
    payload = bytearray()
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr)
        dtype = str(arr.dtype)
        if dtype not in _ALLOWED_DTYPES:
            raise FormatError(f"tensor {name!r} has unsupported dtype {dtype}")
        index["tensors"][name] = {
            "offset": len(payload),
            "shape": list(arr.shape),
            "dtype": dtype,
        }
        little = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        payload.extend(little.tobytes())
    blob = json.dumps(index, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(len(blob).to_bytes(4, "little"))
        fh.write(blob)
        fh.write(bytes(payload))


def load_weights(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if raw[:4] != _MAGIC:
        raise FormatError(f"{path}: not a weight container (magic {raw[:4]!r})")
    n = int.from_bytes(raw[4:8], "little")
    index = json.loads(raw[8:8 + n].decode("utf-8"))
    if index.get("version") != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported container version {index.get('version')!r}")
    base = 8 + n
    tensors = {}
    for name, entry in index["tensors"].items():
        dtype = np.dtype(entry["dtype"]).newbyteorder("<")
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = base + entry["offset"]
        end = start + count * dtype.itemsize
        if end > len(raw):
            raise FormatError(f"{path}: tensor {name!r} extends past end of file")
        arr = np.frombuffer(raw[start:end], dtype=dtype).reshape(shape)
        tensors[name] = arr.astype(arr.dtype.newbyteorder("="))
    return tensors, index.get("meta", {})
