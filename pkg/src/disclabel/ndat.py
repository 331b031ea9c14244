"""NDAT tensor container: the on-disk format shared by fixtures and model weights.

Layout: magic ``NDAT``, u32 version (=1), u32 rank, rank x u64 dims,
then a row-major little-endian float32 payload.
"""

from __future__ import annotations

import os
import struct
import tempfile

import numpy as np

MAGIC = b"NDAT"
VERSION = 1


class NdatError(ValueError):
    """Raised when a file does not parse as a valid NDAT container."""


def write_ndat(path: str | os.PathLike, array: np.ndarray) -> None:
    """Write ``array`` to ``path`` as NDAT, atomically (temp file + rename)."""
    arr = np.ascontiguousarray(array, dtype="<f4")
    header = MAGIC + struct.pack("<II", VERSION, arr.ndim)
    header += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    dirname = os.path.dirname(os.fspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=dirname, suffix=".ndat.tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(header)
            fh.write(arr.tobytes(order="C"))
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_ndat(path: str | os.PathLike) -> np.ndarray:
    """Read an NDAT file and return its payload as a float32 ndarray."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MAGIC:
            raise NdatError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
        version, rank = struct.unpack("<II", fh.read(8))
        if version != VERSION:
            raise NdatError(f"{path}: unsupported version {version}")
        dims = struct.unpack(f"<{rank}Q", fh.read(8 * rank)) if rank else ()
        count = int(np.prod(dims)) if dims else 1
        payload = fh.read(4 * count)
        if len(payload) != 4 * count:
            raise NdatError(
                f"{path}: truncated payload, expected {4 * count} bytes, got {len(payload)}"
            )
        extra = fh.read(1)
        if extra:
            raise NdatError(f"{path}: trailing bytes after payload")
    return np.frombuffer(payload, dtype="<f4").reshape(dims).copy()
