"""Binary PGM (P5) / PPM (P6) reading and writing, 8 or 16 bits per sample."""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np

__all__ = ["ImageFormatError", "read_image", "write_image", "IMAGE_SUFFIXES"]

IMAGE_SUFFIXES = (".pgm", ".ppm", ".pnm")


class ImageFormatError(ValueError):
    pass


class MalformedHeaderError(ImageFormatError):
    pass


class TruncatedPayloadError(ImageFormatError):
    pass


def _header_tokens(buf: bytes, count: int) -> tuple[list[bytes], int]:
    """Read ``count`` whitespace-separated header tokens, skipping # comments."""
    tokens: list[bytes] = []
    pos = 0
    n = len(buf)
    while len(tokens) < count:
        while pos < n and buf[pos : pos + 1].isspace():
            pos += 1
        if pos < n and buf[pos : pos + 1] == b"#":
            while pos < n and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        if pos >= n:
            raise MalformedHeaderError(f"header ended after {len(tokens)} of {count} fields")
        start = pos
        while pos < n and not buf[pos : pos + 1].isspace() and buf[pos : pos + 1] != b"#":
            pos += 1
        tokens.append(buf[start:pos])
    # exactly one whitespace byte separates the header from the raster
    if pos >= n or not buf[pos : pos + 1].isspace():
        raise MalformedHeaderError("missing whitespace after maxval")
    return tokens, pos + 1


def read_image(path) -> np.ndarray:
    """Return an (H, W, J) float64 image scaled to [0, 1] by the file's maxval."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such image file: {path}")
    buf = path.read_bytes()
    if len(buf) < 2 or buf[:2] not in (b"P5", b"P6"):
        raise MalformedHeaderError(f"{path}: not a binary PGM/PPM file (magic {buf[:2]!r})")
    channels = 1 if buf[:2] == b"P5" else 3
    (_, w_tok, h_tok, max_tok), offset = _header_tokens(buf, 4)
    try:
        width, height, maxval = int(w_tok), int(h_tok), int(max_tok)
    except ValueError:
        raise MalformedHeaderError(f"{path}: non-numeric header field") from None
    if width <= 0 or height <= 0 or not 0 < maxval < 65536:
        raise MalformedHeaderError(f"{path}: invalid dimensions {width}x{height} or maxval {maxval}")
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    expected = width * height * channels * dtype.itemsize
    payload = buf[offset : offset + expected]
    if len(payload) < expected:
        raise TruncatedPayloadError(f"{path}: raster has {len(payload)} bytes, expected {expected}")
    raw = np.frombuffer(payload, dtype=dtype).reshape(height, width, channels)
    return raw.astype(np.float64) / maxval


def write_image(path, img, bits: int = 8) -> Path:
    """Write an image in [0, 1] as P5 (one channel) or P6 (three channels)."""
    if bits not in (8, 16):
        raise ValueError(f"bits must be 8 or 16, got {bits}")
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3 or arr.shape[2] not in (1, 3):
        raise ValueError(f"cannot write image of shape {arr.shape}")
    maxval = 255 if bits == 8 else 65535
    dtype = np.dtype("u1") if bits == 8 else np.dtype(">u2")
    raw = np.rint(np.clip(arr, 0.0, 1.0) * maxval).astype(dtype)
    h, w, j = arr.shape
    magic = b"P5" if j == 1 else b"P6"
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(magic + b"\n%d %d\n%d\n" % (w, h, maxval))
        fh.write(raw.tobytes())
    os.replace(tmp, path)
    return path
