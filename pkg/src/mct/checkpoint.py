"""Binary parameter checkpoints.

Layout (all integers little-endian)::

    b"MCTW"  u32 version  u32 flags
    u32 n    n bytes of UTF-8 JSON: {"meta": {...}, "tensors": [{name, dtype, shape}, ...]}
    raw little-endian buffers in manifest order
    if flags & 1:  u32 n  JSON {"step": t, "tensors": [...]}  then adam_m/adam_v buffers

Buffers carry names, so loading never depends on Python object identity.
"""
from __future__ import annotations

import hashlib
import io
import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"MCTW"
VERSION = 1
FLAG_OPTIMIZER = 1

_DTYPES = {"f32": "<f4", "f64": "<f8"}
_NAMES = {np.dtype("float32"): "f32", np.dtype("float64"): "f64"}


class CheckpointError(ValueError):
    pass


def _write_section(buf: io.BytesIO, header: dict, arrays: list[np.ndarray]) -> None:
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    buf.write(struct.pack("<I", len(blob)))
    buf.write(blob)
    for arr in arrays:
        buf.write(np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())


def _read_section(view: memoryview, pos: int):
    if pos + 4 > len(view):
        raise CheckpointError("truncated checkpoint header")
    (n,) = struct.unpack_from("<I", view, pos)
    pos += 4
    if pos + n > len(view):
        raise CheckpointError("truncated checkpoint manifest")
    header = json.loads(bytes(view[pos:pos + n]).decode())
    pos += n
    arrays = {}
    for entry in header["tensors"]:
        dt = np.dtype(_DTYPES[entry["dtype"]])
        count = int(np.prod(entry["shape"], dtype=np.int64))
        nbytes = count * dt.itemsize
        if pos + nbytes > len(view):
            raise CheckpointError(f"truncated payload for tensor {entry['name']!r}")
        arr = np.frombuffer(view[pos:pos + nbytes], dtype=dt).reshape(entry["shape"])
        arrays[entry["name"]] = arr.astype(dt.newbyteorder("="))
        pos += nbytes
    return header, arrays, pos


def _manifest(tensors: Mapping[str, np.ndarray]) -> list[dict]:
    out = []
    for name, arr in tensors.items():
        if arr.dtype not in _NAMES:
            raise CheckpointError(f"unsupported dtype {arr.dtype} for {name!r}")
        out.append({"name": name, "dtype": _NAMES[arr.dtype], "shape": list(arr.shape)})
    return out


def dumps(tensors: Mapping[str, np.ndarray], meta: dict | None = None,
          optimizer: tuple[int, Mapping[str, np.ndarray], Mapping[str, np.ndarray]] | None = None) -> bytes:
    buf = io.BytesIO()
    flags = FLAG_OPTIMIZER if optimizer is not None else 0
    buf.write(MAGIC + struct.pack("<II", VERSION, flags))
    _write_section(buf, {"meta": meta or {}, "tensors": _manifest(tensors)}, list(tensors.values()))
    if optimizer is not None:
        step, m, v = optimizer
        moments = {**{f"m:{k}": a for k, a in m.items()}, **{f"v:{k}": a for k, a in v.items()}}
        _write_section(buf, {"step": int(step), "tensors": _manifest(moments)}, list(moments.values()))
    return buf.getvalue()


def loads(data: bytes):
    """Return ``(tensors, meta, optimizer)``; ``optimizer`` is None or ``(step, m, v)``."""
    view = memoryview(data)
    if len(data) < 12 or bytes(view[:4]) != MAGIC:
        raise CheckpointError("bad magic: not an MCTW checkpoint")
    version, flags = struct.unpack_from("<II", view, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    header, tensors, pos = _read_section(view, 12)
    optimizer = None
    if flags & FLAG_OPTIMIZER:
        oh, moments, pos = _read_section(view, pos)
        m = {k[2:]: a for k, a in moments.items() if k.startswith("m:")}
        v = {k[2:]: a for k, a in moments.items() if k.startswith("v:")}
        optimizer = (oh["step"], m, v)
    if pos != len(data):
        raise CheckpointError("trailing bytes after checkpoint payload")
    return tensors, header["meta"], optimizer


def save(path, tensors, meta=None, optimizer=None) -> str:
    """Write a checkpoint; returns its SHA-256 hex digest."""
    blob = dumps(tensors, meta, optimizer)
    Path(path).write_bytes(blob)
    return hashlib.sha256(blob).hexdigest()


def load(path):
    return loads(Path(path).read_bytes())


def file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
