"""Binary checkpoint container for named parameter tensors.

Layout (all integers little-endian):
  magic "DIVA" | u32 version | u32 entry count
  per entry: u32 name length | utf-8 name | u32 rank | u64 dims... | f64 data
Entries are written in sorted name order so identical parameter maps always
produce identical bytes.
"""

from __future__ import annotations

import os
import struct
import tempfile

import numpy as np

from .errors import BadMagicError, TruncatedCheckpointError, UnsupportedVersionError
from .tensor import Tensor

MAGIC = b"DIVA"
VERSION = 1


def write_checkpoint(path, params: dict) -> None:
    """Serialize a name -> Tensor/ndarray map; atomic via temp-then-rename."""
    chunks = [MAGIC, struct.pack("<II", VERSION, len(params))]
    for name in sorted(params):
        value = params[name]
        arr = np.ascontiguousarray(
            value.data if isinstance(value, Tensor) else np.asarray(value),
            dtype=np.float64,
        )
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(arr.astype("<f8").tobytes())
    payload = b"".join(chunks)
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(os.path.abspath(path)) or ".")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class _Reader:
    def __init__(self, buf: bytes, path):
        self.buf = buf
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedCheckpointError(
                f"{self.path}: needed {n} bytes at offset {self.pos}, "
                f"file has {len(self.buf)}"
            )
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def read_checkpoint(path) -> dict:
    """Decode a checkpoint into a name -> Tensor map (grad disabled).

    Raises BadMagicError / UnsupportedVersionError / TruncatedCheckpointError
    distinctly; nothing is returned on any failure.
    """
    with open(path, "rb") as fh:
        reader = _Reader(fh.read(), path)
    if len(reader.buf) < 4 or reader.take(4) != MAGIC:
        raise BadMagicError(f"{path}: bad magic bytes (expected {MAGIC!r})")
    version = reader.u32()
    if version != VERSION:
        raise UnsupportedVersionError(
            f"{path}: checkpoint version {version}, reader supports {VERSION}"
        )
    count = reader.u32()
    params: dict[str, Tensor] = {}
    for _ in range(count):
        name = reader.take(reader.u32()).decode("utf-8")
        rank = reader.u32()
        dims = struct.unpack(f"<{rank}Q", reader.take(8 * rank))
        size = 1
        for d in dims:
            size *= d
        raw = reader.take(8 * size)
        arr = np.frombuffer(raw, dtype="<f8").reshape(dims).astype(np.float64)
        params[name] = Tensor(arr)
    return params


def split_model_params(params: dict) -> tuple[dict, dict]:
    """Split a combined checkpoint map into (encoder, denoiser) sub-maps."""
    enc = {k[len("encoder.") :]: v for k, v in params.items() if k.startswith("encoder.")}
    den = {k[len("denoiser.") :]: v for k, v in params.items() if k.startswith("denoiser.")}
    return enc, den


def join_model_params(encoder_params: dict, denoiser_params: dict) -> dict:
    """Combine encoder/denoiser maps under their name prefixes."""
    out = {f"encoder.{k}": v for k, v in encoder_params.items()}
    out.update({f"denoiser.{k}": v for k, v in denoiser_params.items()})
    return out
