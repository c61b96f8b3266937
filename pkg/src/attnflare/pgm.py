"""Binary PGM (P5) and PPM (P6) reading/writing, 8-bit per sample."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import FormatError


def _read_header_tokens(data: bytes, count: int):
    """Yield the first ``count`` whitespace-delimited header tokens, skipping
    ``#`` comments, and the offset of the first raster byte."""
    tokens = []
    i = 0
    n = len(data)
    while len(tokens) < count:
        while i < n and data[i : i + 1].isspace():
            i += 1
        if i < n and data[i : i + 1] == b"#":
            while i < n and data[i] != 0x0A:
                i += 1
            continue
        start = i
        while i < n and not data[i : i + 1].isspace():
            i += 1
        if start == i:
            raise FormatError("truncated netpbm header")
        tokens.append(data[start:i])
    if i >= n or not data[i : i + 1].isspace():
        raise FormatError("netpbm header not terminated")
    return tokens, i + 1


def read_pgm(path) -> np.ndarray:
    """Read an 8-bit binary PGM into a uint8 [H, W] array."""
    raw = Path(path).read_bytes()
    if len(raw) < 2:
        raise FormatError(f"{path}: not a netpbm file")
    magic = raw[:2]
    if magic == b"P6":
        raise FormatError(f"{path}: multichannel (P6) image where grayscale is required")
    if magic != b"P5":
        raise FormatError(f"{path}: unsupported netpbm magic {magic!r}")
    tokens, offset = _read_header_tokens(raw, 4)
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise FormatError(f"{path}: malformed PGM header") from exc
    if width < 1 or height < 1:
        raise FormatError(f"{path}: bad dimensions {width}x{height}")
    if not (0 < maxval <= 255):
        raise FormatError(f"{path}: unsupported maxval {maxval} (8-bit only)")
    body = raw[offset : offset + width * height]
    if len(body) != width * height:
        raise FormatError(f"{path}: raster truncated")
    return np.frombuffer(body, dtype=np.uint8).reshape(height, width)


def write_pgm(path, image: np.ndarray):
    """Write a uint8 [H, W] array as binary PGM with maxval 255."""
    img = np.asarray(image)
    if img.ndim != 2:
        raise FormatError(f"PGM writer needs a 2-d array, got shape {img.shape}")
    img = img.astype(np.uint8, copy=False)
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n255\n" % (w, h))
        fh.write(img.tobytes())


def write_ppm(path, image: np.ndarray):
    """Write a uint8 [H, W, 3] array as binary PPM with maxval 255."""
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[2] != 3:
        raise FormatError(f"PPM writer needs [H, W, 3], got shape {img.shape}")
    img = img.astype(np.uint8, copy=False)
    h, w, _ = img.shape
    with open(path, "wb") as fh:
        fh.write(b"P6\n%d %d\n255\n" % (w, h))
        fh.write(img.tobytes())
