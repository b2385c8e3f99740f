"""Binary container: a JSON manifest followed by raw little-endian tensors.

One file holds named tensors (complex128 or float64) plus a free-form JSON
``meta`` block. Round-trips are bit-exact; byte order is pinned to little
endian regardless of platform.
"""

from __future__ import annotations

import json

import numpy as np

from .errors import ConfigError

_MAGIC = b"URDATA1\n"
_DTYPES = {"<c16": np.dtype("<c16"), "<f8": np.dtype("<f8"), "<i8": np.dtype("<i8")}


def _code_for(arr: np.ndarray) -> str:
    if np.iscomplexobj(arr):
        return "<c16"
    if arr.dtype.kind == "i":
        return "<i8"
    return "<f8"


def write_container(path, tensors: dict[str, np.ndarray], meta: dict) -> None:
    entries = []
    blobs = []
    offset = 0
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        code = _code_for(arr)
        blob = np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()
        entries.append({
            "name": name,
            "shape": list(arr.shape),
            "dtype": code,
            "offset": offset,
            "nbytes": len(blob),
        })
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps({"tensors": entries, "meta": meta}, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(len(header).to_bytes(8, "little"))
        f.write(header)
        for blob in blobs:
            f.write(blob)


def read_container(path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as f:
        if f.read(len(_MAGIC)) != _MAGIC:
            raise ConfigError(f"{path} is not a tensor container")
        hlen = int.from_bytes(f.read(8), "little")
        header = json.loads(f.read(hlen).decode())
        payload = f.read()
    tensors = {}
    for entry in header["tensors"]:
        raw = payload[entry["offset"]:entry["offset"] + entry["nbytes"]]
        arr = np.frombuffer(raw, dtype=_DTYPES[entry["dtype"]]).reshape(entry["shape"])
        tensors[entry["name"]] = arr.copy()
    return tensors, header["meta"]
