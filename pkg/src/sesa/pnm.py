"""Binary PGM (P5) and PPM (P6) images, 8-bit, as float arrays in [0, 1]."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import DataError


def _tokens(buf, count):
    """Read ``count`` whitespace-separated header fields, skipping comments."""
    out, pos = [], 0
    while len(out) < count:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DataError("truncated PNM header")
        out.append(buf[start:pos])
    return out, pos + 1


def read_pnm(path):
    """Return [C, H, W] float64 in [0, 1]; C is 1 for P5 and 3 for P6."""
    buf = Path(path).read_bytes()
    (magic, w, h, maxval), pos = _tokens(buf, 4)
    if magic not in (b"P5", b"P6"):
        raise DataError(f"{path}: unsupported PNM type {magic!r}")
    w, h, maxval = int(w), int(h), int(maxval)
    if maxval != 255:
        raise DataError(f"{path}: only 8-bit images are supported")
    c = 1 if magic == b"P5" else 3
    raw = np.frombuffer(buf, dtype=np.uint8, count=w * h * c, offset=pos) if len(buf) - pos >= w * h * c else None
    if raw is None:
        raise DataError(f"{path}: pixel data truncated")
    return raw.reshape(h, w, c).transpose(2, 0, 1).astype(np.float64) / 255.0


def to_bytes(img):
    return np.round(np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)


def write_pnm(path, img):
    """Write [1, H, W] or [H, W] as P5, [3, H, W] as P6."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        img = img[None]
    c, h, w = img.shape
    if c not in (1, 3):
        raise DataError(f"cannot write {c}-channel image as PNM")
    header = f"{'P5' if c == 1 else 'P6'}\n{w} {h}\n255\n".encode("ascii")
    Path(path).write_bytes(header + to_bytes(img).transpose(1, 2, 0).tobytes())
