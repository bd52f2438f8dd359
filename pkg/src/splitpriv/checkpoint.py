"""SPLK tensor container.

Layout::

    b"SPLK" | u32 LE version (=1) | u64 LE index length | UTF-8 JSON index | payloads

The index maps each tensor name to ``{dtype, shape, offset, length}`` where
``offset`` is relative to the first payload byte; payloads are raw
little-endian and appear in index order.  The reserved key ``"__meta__"``
carries free-form JSON (ParamStore version, manifests, configs).
"""
from __future__ import annotations

import json
import math
import os
import struct
from pathlib import Path

import numpy as np

from .errors import CheckpointError
from .modelgraph import ParamStore

MAGIC = b"SPLK"
VERSION = 1
META_KEY = "__meta__"
_HEADER = struct.Struct("<4sIQ")
_DTYPES = {"float32": "<f4", "float64": "<f8", "uint8": "u1", "int64": "<i8", "int32": "<i4"}


def write_container(path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    index = {}
    offset = 0
    blobs = []
    for name, arr in tensors.items():
        if name == META_KEY:
            raise CheckpointError(f"{META_KEY!r} is reserved")
        arr = np.asarray(arr)
        dtype = arr.dtype.name
        if dtype not in _DTYPES:
            raise CheckpointError(f"unsupported dtype {dtype} for {name}")
        blob = np.ascontiguousarray(arr, dtype=_DTYPES[dtype]).tobytes()
        index[name] = {"dtype": dtype, "shape": list(arr.shape), "offset": offset, "length": len(blob)}
        blobs.append(blob)
        offset += len(blob)
    index[META_KEY] = meta or {}
    raw_index = json.dumps(index, sort_keys=False, separators=(",", ":")).encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, len(raw_index)))
        fh.write(raw_index)
        for blob in blobs:
            fh.write(blob)
    os.replace(tmp, path)


def read_container(path) -> tuple[dict[str, np.ndarray], dict]:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise CheckpointError("truncated header")
    magic, version, index_len = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r}")
    if version != VERSION:
        raise CheckpointError(f"unsupported container version {version}")
    start = _HEADER.size + index_len
    if len(data) < start:
        raise CheckpointError("truncated index")
    try:
        index = json.loads(data[_HEADER.size:start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable index: {exc}") from exc
    meta = index.pop(META_KEY, {})
    tensors = {}
    for name, entry in index.items():
        dtype = entry.get("dtype")
        if dtype not in _DTYPES:
            raise CheckpointError(f"{name}: unsupported dtype {dtype!r}")
        shape = tuple(entry["shape"])
        expected = math.prod(shape) * np.dtype(_DTYPES[dtype]).itemsize
        if entry["length"] != expected:
            raise CheckpointError(f"{name}: index length {entry['length']} disagrees with shape {shape}")
        lo = start + entry["offset"]
        hi = lo + entry["length"]
        if hi > len(data):
            raise CheckpointError(f"{name}: truncated payload ({len(data) - lo} of {entry['length']} bytes)")
        arr = np.frombuffer(data[lo:hi], dtype=_DTYPES[dtype]).reshape(shape)
        tensors[name] = arr.astype(dtype, copy=True)
    return tensors, meta


def save_checkpoint(params: ParamStore, path, meta: dict | None = None) -> None:
    m = dict(meta or {})
    m["param_version"] = params.version
    write_container(path, params.tensors, m)


def load_checkpoint(path, with_meta: bool = False):
    tensors, meta = read_container(path)
    store = ParamStore(tensors, int(meta.get("param_version", 1)))
    return (store, meta) if with_meta else store
