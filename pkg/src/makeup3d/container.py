"""Binary tensor container shared by morphable models and checkpoints.

Layout (all integers little-endian)::

    offset 0   8 bytes   magic  b"M3DCONT\\0"
    offset 8   u32       format version
    offset 12  u64       header length in bytes (n)
    offset 20  n bytes   UTF-8 JSON header
    ...        raw tensor bytes, concatenated, little-endian

The JSON header carries ``{"kind": str, "metadata": {...}, "tensors":
{name: {"dtype": str, "shape": [...], "offset": int, "nbytes": int}}}``.
Tensor offsets are relative to the first byte after the header.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"M3DCONT\0"
FORMAT_VERSION = 1
_PREAMBLE = struct.Struct("<8sIQ")


class ContainerError(ValueError):
    """Raised when a container file is missing, truncated or malformed."""

    def __init__(self, path, reason):
        super().__init__(f"{path}: {reason}")
        self.path = str(path)
        self.reason = reason


def write_container(path, tensors, *, kind, metadata=None):
    path = Path(path)
    entries = {}
    blobs = []
    offset = 0
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr)
        if arr.dtype.byteorder == ">":
            arr = arr.astype(arr.dtype.newbyteorder("<"))
        raw = arr.tobytes()
        entries[name] = {
            "dtype": arr.dtype.str.lstrip("<|="),
            "shape": list(arr.shape),
            "offset": offset,
            "nbytes": len(raw),
        }
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps(
        {"kind": kind, "metadata": metadata or {}, "tensors": entries},
        sort_keys=True,
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_PREAMBLE.pack(MAGIC, FORMAT_VERSION, len(header)))
        fh.write(header)
        for raw in blobs:
            fh.write(raw)
    return path


def read_container(path, *, kind=None):
    """Return ``(tensors, metadata)``; arrays are native-endian copies."""
    path = Path(path)
    if not path.exists():
        raise ContainerError(path, "file does not exist")
    data = path.read_bytes()
    if len(data) < _PREAMBLE.size:
        raise ContainerError(path, "truncated preamble")
    magic, version, hlen = _PREAMBLE.unpack_from(data)
    if magic != MAGIC:
        raise ContainerError(path, "bad magic bytes")
    if version != FORMAT_VERSION:
        raise ContainerError(
            path, f"format version {version} is not supported (reader is {FORMAT_VERSION})"
        )
    start = _PREAMBLE.size
    if len(data) < start + hlen:
        raise ContainerError(path, "truncated header")
    try:
        header = json.loads(data[start:start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerError(path, f"corrupt header ({exc})") from None
    if kind is not None and header.get("kind") != kind:
        raise ContainerError(path, f"expected kind {kind!r}, found {header.get('kind')!r}")
    body = start + hlen
    tensors = {}
    for name, entry in header["tensors"].items():
        lo = body + entry["offset"]
        hi = lo + entry["nbytes"]
        if hi > len(data):
            raise ContainerError(path, f"truncated tensor data for {name!r}")
        dtype = np.dtype("<" + entry["dtype"]) if entry["dtype"][0] in "fiuc" else np.dtype(entry["dtype"])
        arr = np.frombuffer(data[lo:hi], dtype=dtype).reshape(entry["shape"])
        tensors[name] = arr.astype(dtype.newbyteorder("="), copy=True)
    return tensors, header.get("metadata", {})
