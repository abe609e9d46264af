"""Minimal binary PPM (P6) / PGM (P5) reader and writer.

Images are float arrays in [0, 1] quantized to maxval-255 bytes; label maps
are stored one class id per gray byte (255 reserved for ignore), which makes
the label round trip lossless.  Headers follow the netpbm convention:
magic, whitespace/comment-separated width, height and maxval tokens, one
whitespace byte, then the raw payload.
"""

from __future__ import annotations

import numpy as np


class PnmError(ValueError):
    """Malformed header or payload of the wrong size."""


def write_ppm(path, image: np.ndarray) -> None:
    """image: (3, h, w) or (h, w, 3) floats in [0, 1]."""
    if image.ndim != 3:
        raise PnmError(f"expected a rank-3 image, got shape {image.shape}")
    if image.shape[0] == 3:
        image = np.moveaxis(image, 0, -1)
    if image.shape[-1] != 3:
        raise PnmError(f"expected 3 channels, got shape {image.shape}")
    h, w = image.shape[:2]
    data = np.rint(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(b"P6\n%d %d\n255\n" % (w, h))
        fh.write(data.tobytes())


def write_pgm(path, gray: np.ndarray) -> None:
    """gray: (h, w) uint8-compatible values in [0, 255]."""
    if gray.ndim != 2:
        raise PnmError(f"expected a rank-2 map, got shape {gray.shape}")
    h, w = gray.shape
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n255\n" % (w, h))
        fh.write(np.ascontiguousarray(gray, dtype=np.uint8).tobytes())


def _read_tokens(raw: bytes, count: int, offset: int) -> tuple[list[int], int]:
    tokens: list[int] = []
    i = offset
    while len(tokens) < count:
        if i >= len(raw):
            raise PnmError("truncated header")
        ch = raw[i : i + 1]
        if ch == b"#":
            while i < len(raw) and raw[i : i + 1] != b"\n":
                i += 1
        elif ch.isspace():
            i += 1
        else:
            j = i
            while j < len(raw) and not raw[j : j + 1].isspace():
                j += 1
            tok = raw[i:j]
            if not tok.isdigit():
                raise PnmError(f"bad header token {tok!r}")
            tokens.append(int(tok))
            i = j
    return tokens, i


def _read_pnm(path, magic: bytes) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:2] != magic:
        raise PnmError(f"{path}: expected magic {magic!r}, got {raw[:2]!r}")
    (w, h, maxval), i = _read_tokens(raw, 3, 2)
    if maxval != 255:
        raise PnmError(f"{path}: only maxval 255 is supported, got {maxval}")
    i += 1  # the single whitespace byte after maxval
    channels = 3 if magic == b"P6" else 1
    payload = raw[i : i + w * h * channels]
    if len(payload) != w * h * channels:
        raise PnmError(f"{path}: payload has {len(payload)} bytes, expected {w * h * channels}")
    arr = np.frombuffer(payload, dtype=np.uint8)
    return arr.reshape(h, w, 3) if channels == 3 else arr.reshape(h, w)


def read_ppm(path) -> np.ndarray:
    """Returns (3, h, w) float32 in [0, 1]."""
    arr = _read_pnm(path, b"P6")
    return np.moveaxis(arr.astype(np.float32) / 255.0, -1, 0)


def read_pgm(path) -> np.ndarray:
    """Returns (h, w) uint8."""
    return _read_pnm(path, b"P5")
