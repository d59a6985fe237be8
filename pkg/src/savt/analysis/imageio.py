"""Binary PPM (P6) read/write for float RGB images in [0, 1]."""

from __future__ import annotations

import re
from pathlib import Path

import numpy as np


def to_bytes(rgb: np.ndarray, upscale: int = 1) -> bytes:
    rgb = np.asarray(rgb, dtype=np.float64)
    if rgb.ndim == 2:
        rgb = np.repeat(rgb[..., None], 3, axis=2)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValueError(f"expected h x w x 3, got {rgb.shape}")
    if upscale > 1:
        rgb = np.repeat(np.repeat(rgb, upscale, axis=0), upscale, axis=1)
    px = np.round(np.clip(rgb, 0.0, 1.0) * 255.0).astype(np.uint8)
    h, w, _ = px.shape
    return b"P6\n%d %d\n255\n" % (w, h) + px.tobytes()


def write_ppm(path, rgb: np.ndarray, upscale: int = 1) -> None:
    Path(path).write_bytes(to_bytes(rgb, upscale))


_HEADER = re.compile(rb"P6\s+(?:#.*\s+)*(\d+)\s+(\d+)\s+(\d+)\s")


def read_ppm(path) -> np.ndarray:
    """Returns h x w x 3 float64 in [0, 1]."""
    buf = Path(path).read_bytes()
    m = _HEADER.match(buf)
    if not m:
        raise ValueError(f"{path}: not a binary PPM")
    w, h, maxval = (int(v) for v in m.groups())
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit PPM is supported")
    data = np.frombuffer(buf, dtype=np.uint8, offset=m.end())
    if data.size != w * h * 3:
        raise ValueError(f"{path}: expected {w * h * 3} pixel bytes, found {data.size}")
    return data.reshape(h, w, 3) / 255.0
