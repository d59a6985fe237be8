"""SAVT binary container shared by model files and feature dumps.

Layout (all integers little-endian)::

    b"SAVT" | version: u32 | manifest_len: u64 | manifest (UTF-8 JSON)
    | zero padding to a 64-byte boundary | tensor 0 | padding | tensor 1 | ...

The manifest is ``{"kind": str, "meta": {...}, "tensors": [{"name", "shape",
"dtype"}, ...]}`` and lists tensors in payload order. Every payload starts at
a file offset that is a multiple of 64. JSON is written with sorted keys and
fixed separators so identical content yields identical bytes.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Callable, Mapping

import numpy as np

MAGIC = b"SAVT"
VERSION = 1
ALIGN = 64

DTYPES = {
    "float32": np.dtype("<f4"),
    "float64": np.dtype("<f8"),
    "int64": np.dtype("<i8"),
    "uint8": np.dtype("u1"),
}


class ContainerError(ValueError):
    """Base class for unreadable SAVT files."""


class MagicError(ContainerError):
    pass


class VersionError(ContainerError):
    pass


class ManifestError(ContainerError):
    pass


class TruncatedFileError(ContainerError):
    pass


def _pad(n: int) -> int:
    return (-n) % ALIGN


def dtype_name(arr: np.ndarray) -> str:
    for name, dt in DTYPES.items():
        if arr.dtype == dt or arr.dtype == dt.newbyteorder("="):
            return name
    if arr.dtype == np.bool_:
        return "uint8"
    raise ContainerError(f"unsupported dtype {arr.dtype}")


def encode(kind: str, tensors: Mapping[str, np.ndarray], meta: dict | None = None,
           dtypes: Mapping[str, str] | None = None) -> bytes:
    """Serialize ``tensors`` (in iteration order). ``dtypes`` overrides storage per name."""
    dtypes = dict(dtypes or {})
    entries = []
    payloads = []
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        dt = dtypes.get(name) or dtype_name(arr)
        if dt not in DTYPES:
            raise ContainerError(f"unsupported storage dtype {dt!r} for {name}")
        entries.append({"name": name, "shape": list(arr.shape), "dtype": dt})
        payloads.append(np.ascontiguousarray(arr, dtype=DTYPES[dt]).tobytes())
    manifest = json.dumps(
        {"kind": kind, "meta": meta or {}, "tensors": entries},
        sort_keys=True, separators=(",", ":"), allow_nan=False,
    ).encode("utf-8")

    out = bytearray(MAGIC)
    out += struct.pack("<IQ", VERSION, len(manifest))
    out += manifest
    for blob in payloads:
        out += b"\0" * _pad(len(out))
        out += blob
    return bytes(out)


def _parse_manifest(buf: bytes) -> tuple[dict, int]:
    if len(buf) < 16:
        raise TruncatedFileError(f"file is {len(buf)} bytes, shorter than the SAVT header")
    if buf[:4] != MAGIC:
        raise MagicError(f"bad magic {buf[:4]!r}, expected {MAGIC!r}")
    version, mlen = struct.unpack_from("<IQ", buf, 4)
    if version != VERSION:
        raise VersionError(f"unsupported SAVT version {version} (reader supports {VERSION})")
    if 16 + mlen > len(buf):
        raise TruncatedFileError("file ends inside the manifest")
    try:
        manifest = json.loads(buf[16:16 + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ManifestError(f"manifest is not valid JSON: {exc}") from exc
    if not isinstance(manifest, dict) or not isinstance(manifest.get("tensors"), list):
        raise ManifestError("manifest lacks a tensor list")
    for entry in manifest["tensors"]:
        try:
            ok = (
                isinstance(entry["name"], str)
                and entry["dtype"] in DTYPES
                and all(isinstance(s, int) and s >= 0 for s in entry["shape"])
            )
        except (KeyError, TypeError):
            ok = False
        if not ok:
            raise ManifestError(f"malformed tensor entry {entry!r}")
    return manifest, 16 + mlen


def decode(buf: bytes, validate: Callable[[dict], None] | None = None) -> tuple[str, dict, dict]:
    """Parse a container. Returns ``(kind, meta, tensors)``.

    ``validate`` sees the manifest before any payload is read and may raise
    ``ManifestError``.
    """
    manifest, pos = _parse_manifest(buf)
    if validate is not None:
        validate(manifest)
    tensors: dict[str, np.ndarray] = {}
    for entry in manifest["tensors"]:
        pos += _pad(pos)
        dt = DTYPES[entry["dtype"]]
        shape = tuple(entry["shape"])
        nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        if pos + nbytes > len(buf):
            raise TruncatedFileError(f"file ends inside tensor {entry['name']!r}")
        tensors[entry["name"]] = np.frombuffer(buf, dtype=dt, count=nbytes // dt.itemsize,
                                               offset=pos).reshape(shape).copy()
        pos += nbytes
    if pos != len(buf):
        raise ManifestError(f"{len(buf) - pos} trailing bytes after the last tensor")
    return manifest.get("kind", ""), manifest.get("meta", {}), tensors


def write(path, kind: str, tensors: Mapping[str, np.ndarray], meta: dict | None = None,
          dtypes: Mapping[str, str] | None = None) -> None:
    Path(path).write_bytes(encode(kind, tensors, meta, dtypes))


def read(path, validate: Callable[[dict], None] | None = None) -> tuple[str, dict, dict]:
    return decode(Path(path).read_bytes(), validate)
