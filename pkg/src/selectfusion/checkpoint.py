"""Flat binary checkpoint archive for parameter stores.

Layout (all multi-byte fields little-endian):

    bytes 0..3    magic ``SFCP``
    bytes 4..7    format version, uint32 (currently 1)
    bytes 8..15   header length ``n``, uint64
    bytes 16..16+n  header, UTF-8 JSON
    remainder     raw float64 data

The JSON header carries the Adam step count, optional caller metadata, and
an ordered entry list ``[{"name": ..., "shape": [...]}, ...]``. The data
section stores, for each entry in header order, the parameter values
followed by the Adam first- and second-moment arrays, each as row-major
little-endian float64.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Optional, Tuple

import numpy as np

from .nn import ParameterStore

__all__ = ["save_checkpoint", "load_checkpoint", "CheckpointError", "FORMAT_VERSION"]

MAGIC = b"SFCP"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    """The file is not a readable checkpoint of a supported version."""


def save_checkpoint(path, store: ParameterStore, meta: Optional[dict] = None) -> None:
    path = Path(path)
    entries = [{"name": name, "shape": list(store.arrays[name].shape)} for name in store.names()]
    header = {
        "version": FORMAT_VERSION,
        "step_count": store.step_count,
        "meta": meta or {},
        "entries": entries,
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    chunks = [MAGIC, struct.pack("<I", FORMAT_VERSION), struct.pack("<Q", len(header_bytes)), header_bytes]
    for entry in entries:
        name = entry["name"]
        for arr in (store.arrays[name], store.adam_m[name], store.adam_v[name]):
            chunks.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(b"".join(chunks))


def load_checkpoint(path) -> Tuple[ParameterStore, dict]:
    path = Path(path)
    blob = path.read_bytes()
    if blob[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {blob[:4]!r}")
    (version,) = struct.unpack("<I", blob[4:8])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    (header_len,) = struct.unpack("<Q", blob[8:16])
    header = json.loads(blob[16 : 16 + header_len].decode("utf-8"))
    store = ParameterStore()
    offset = 16 + header_len
    for entry in header["entries"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        arrays = []
        for _ in range(3):
            arr = np.frombuffer(blob, dtype="<f8", count=count, offset=offset).reshape(shape)
            arrays.append(arr.astype(np.float64))
            offset += count * 8
        name = entry["name"]
        store.arrays[name] = arrays[0]
        store.adam_m[name] = arrays[1]
        store.adam_v[name] = arrays[2]
    store.step_count = int(header["step_count"])
    return store, header.get("meta", {})
