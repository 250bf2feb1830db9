"""Minimal binary PGM/PPM reading and writing, plus atomic file writes."""
from __future__ import annotations

import os
import tempfile
from pathlib import Path

import numpy as np


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def encode_pnm(array: np.ndarray) -> bytes:
    """Encode a uint8 (H, W) array as P5 or (H, W, 3) as P6."""
    array = np.asarray(array)
    if array.dtype != np.uint8:
        raise TypeError(f"expected uint8 array, got {array.dtype}")
    if array.ndim == 2:
        magic = b"P5"
    elif array.ndim == 3 and array.shape[2] == 3:
        magic = b"P6"
    else:
        raise ValueError(f"cannot encode array of shape {array.shape}")
    h, w = array.shape[:2]
    header = magic + b"\n%d %d\n255\n" % (w, h)
    return header + np.ascontiguousarray(array).tobytes()


def write_pnm(path, array: np.ndarray) -> None:
    atomic_write_bytes(path, encode_pnm(array))


def _tokens(data: bytes):
    pos = 0
    while True:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        yield data[start:pos], pos


def read_pnm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    tokens = _tokens(data)
    magic, _ = next(tokens)
    if magic not in (b"P5", b"P6"):
        raise ValueError(f"{path}: unsupported PNM magic {magic!r}")
    w = int(next(tokens)[0])
    h = int(next(tokens)[0])
    maxval_tok, pos = next(tokens)
    if int(maxval_tok) > 255:
        raise ValueError(f"{path}: only 8-bit PNM files are supported")
    # exactly one whitespace byte separates the header from the raster
    raster = data[pos + 1 :]
    channels = 1 if magic == b"P5" else 3
    need = w * h * channels
    if len(raster) < need:
        raise ValueError(f"{path}: truncated raster")
    arr = np.frombuffer(raster[:need], dtype=np.uint8)
    return arr.reshape((h, w) if channels == 1 else (h, w, 3)).copy()
