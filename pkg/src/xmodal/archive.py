"""XMTA tensor archive: named little-endian arrays behind a JSON header.

Layout::

    b"XMTA" | u16 version (=1) | u32 header length | UTF-8 JSON header | payloads

The header holds ``{"meta": ..., "tensors": [{name, dtype, shape, offset,
nbytes}, ...]}``; offsets are relative to the first payload byte.
"""
from __future__ import annotations

import json
import os
import struct

import numpy as np

MAGIC = b"XMTA"
VERSION = 1
_PREFIX = struct.Struct("<4sHI")
_DTYPES = ("float64", "float32", "int64", "int32", "uint8", "bool")


class ArchiveError(Exception):
    pass


class BadMagicError(ArchiveError):
    pass


class UnsupportedVersionError(ArchiveError):
    pass


class TruncatedArchiveError(ArchiveError):
    pass


class CorruptHeaderError(ArchiveError):
    pass


def encode_tensor_archive(tensors: dict, header: dict | None = None) -> bytes:
    entries = []
    payloads = []
    offset = 0
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        dt = arr.dtype.name
        if dt not in _DTYPES:
            raise ValueError(f"unsupported dtype {dt} for tensor {name!r}")
        raw = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes()
        entries.append(
            {"name": name, "dtype": dt, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)}
        )
        payloads.append(raw)
        offset += len(raw)
    head = json.dumps({"meta": header or {}, "tensors": entries}, sort_keys=True).encode("utf-8")
    return _PREFIX.pack(MAGIC, VERSION, len(head)) + head + b"".join(payloads)


def decode_tensor_archive(buf: bytes):
    if len(buf) < _PREFIX.size:
        if not MAGIC.startswith(buf[:4]):
            raise BadMagicError("not an XMTA archive")
        raise TruncatedArchiveError("archive shorter than its fixed prefix")
    magic, version, hlen = _PREFIX.unpack_from(buf)
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}")
    if version != VERSION:
        raise UnsupportedVersionError(f"archive version {version}, expected {VERSION}")
    start = _PREFIX.size
    if len(buf) < start + hlen:
        raise TruncatedArchiveError("header truncated")
    try:
        head = json.loads(buf[start : start + hlen].decode("utf-8"))
        entries = head["tensors"]
    except (ValueError, KeyError) as exc:
        raise CorruptHeaderError(str(exc)) from exc
    body = start + hlen
    tensors = {}
    for e in entries:
        lo = body + e["offset"]
        hi = lo + e["nbytes"]
        if hi > len(buf):
            raise TruncatedArchiveError(f"payload of {e['name']!r} truncated")
        dt = np.dtype(e["dtype"]).newbyteorder("<")
        arr = np.frombuffer(buf[lo:hi], dtype=dt).reshape(e["shape"])
        tensors[e["name"]] = arr.astype(dt.newbyteorder("="), copy=True)
    return tensors, head.get("meta", {})


def write_tensor_archive(path, tensors: dict, header: dict | None = None) -> None:
    data = encode_tensor_archive(tensors, header)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def read_tensor_archive(path):
    """Returns ``(tensors, header)``."""
    with open(path, "rb") as fh:
        return decode_tensor_archive(fh.read())
