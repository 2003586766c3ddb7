"""Binary PPM (P6) and PGM (P5) images with ASCII headers."""
from __future__ import annotations

import os

import numpy as np


def to_uint8(img: np.ndarray) -> np.ndarray:
    """[0, 1] floats to bytes, clamped and rounded."""
    return np.clip(np.rint(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def write_ppm(path: str | os.PathLike, img: np.ndarray, scale: int = 1) -> None:
    """Write a (3, H, W) float image in [0, 1] as P6."""
    arr = to_uint8(img).transpose(1, 2, 0)
    if scale > 1:
        arr = arr.repeat(scale, axis=0).repeat(scale, axis=1)
    h, w, _ = arr.shape
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(np.ascontiguousarray(arr).tobytes())


def write_pgm(path: str | os.PathLike, arr: np.ndarray) -> None:
    """Write an (H, W) uint8 array as P5."""
    arr = np.ascontiguousarray(arr, dtype=np.uint8)
    h, w = arr.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(arr.tobytes())


def _read_netpbm(path, magic: bytes, channels: int) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    fields, pos = [], 0
    while len(fields) < 4:
        if pos >= len(data):
            raise ValueError(f"{path}: truncated header")
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while end < len(data) and not data[end:end + 1].isspace():
            end += 1
        fields.append(data[pos:end])
        pos = end
    if fields[0] != magic:
        raise ValueError(f"{path}: expected {magic!r}, found {fields[0]!r}")
    w, h, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit images are supported")
    body = data[pos + 1:]
    n = w * h * channels
    if len(body) != n:
        raise ValueError(f"{path}: expected {n} payload bytes, found {len(body)}")
    arr = np.frombuffer(body, dtype=np.uint8)
    return arr.reshape(h, w, channels) if channels > 1 else arr.reshape(h, w)


def read_ppm(path) -> np.ndarray:
    """(H, W, 3) uint8."""
    return _read_netpbm(path, b"P6", 3)


def read_pgm(path) -> np.ndarray:
    """(H, W) uint8."""
    return _read_netpbm(path, b"P5", 1)
