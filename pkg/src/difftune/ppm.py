"""Binary P6 PPM image I/O with the canonical [0,255] <-> [-1,1] pixel map."""

from __future__ import annotations

import os
import tempfile

import numpy as np

from .errors import PpmError
from .tensor import Tensor


def _read_token(buf: bytes, pos: int) -> tuple[bytes, int]:
    # skip whitespace and '#' comment lines between header fields
    n = len(buf)
    while pos < n:
        c = buf[pos : pos + 1]
        if c == b"#":
            while pos < n and buf[pos : pos + 1] != b"\n":
                pos += 1
        elif c.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not buf[pos : pos + 1].isspace():
        pos += 1
    if start == pos:
        raise PpmError("unexpected end of PPM header")
    return buf[start:pos], pos


def read_ppm(path) -> Tensor:
    """Read a binary P6 PPM (maxval 255) into an (H, W, 3) tensor in [-1, 1]."""
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:2] != b"P6":
        raise PpmError(f"{path}: not a binary P6 PPM (header {buf[:2]!r})")
    pos = 2
    width, pos = _read_token(buf, pos)
    height, pos = _read_token(buf, pos)
    maxval, pos = _read_token(buf, pos)
    try:
        w, h, mv = int(width), int(height), int(maxval)
    except ValueError:
        raise PpmError(f"{path}: non-numeric PPM header fields") from None
    if mv != 255:
        raise PpmError(f"{path}: maxval must be 255, got {mv}")
    if w < 1 or h < 1:
        raise PpmError(f"{path}: bad dimensions {w}x{h}")
    pos += 1  # single whitespace byte after maxval
    expected = w * h * 3
    pixels = buf[pos : pos + expected]
    if len(pixels) != expected:
        raise PpmError(
            f"{path}: expected {expected} pixel bytes, found {len(pixels)}"
        )
    arr = np.frombuffer(pixels, dtype=np.uint8).reshape(h, w, 3)
    return Tensor(arr.astype(np.float64) / 255.0 * 2.0 - 1.0)


def write_ppm(path, image) -> None:
    """Write an (H, W, 3) image in [-1, 1] as canonical binary P6, atomically."""
    data = image.data if isinstance(image, Tensor) else np.asarray(image)
    if data.ndim != 3 or data.shape[2] != 3:
        raise PpmError(f"write_ppm expects (H, W, 3), got {data.shape}")
    h, w, _ = data.shape
    body = np.clip(np.rint((data + 1.0) * 127.5), 0, 255).astype(np.uint8)
    payload = b"P6\n%d %d\n255\n" % (w, h) + body.tobytes()
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(os.path.abspath(path)) or ".")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
