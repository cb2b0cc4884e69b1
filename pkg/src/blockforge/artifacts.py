"""Binary artifact framing shared by every on-disk format.

Every artifact starts with a 4-byte magic and a little-endian u32 version.
Payloads are built from two primitives: length-prefixed JSON metadata blocks
and dtype-tagged arrays.  Loaders fail fast with the offending path in the
message; nothing in here attempts repair.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import BinaryIO

import numpy as np

MAGIC_SAMPLES = b"BFSS"
MAGIC_TRIPLANE = b"BFTP"
MAGIC_DECODER = b"BFDC"
MAGIC_LATENT = b"BFLT"
MAGIC_VAE = b"BFVA"
MAGIC_DIFFUSION = b"BFDM"


class ArtifactError(ValueError):
    """Raised when an artifact file is missing, truncated, or mislabeled."""


_DTYPE_CODES = {
    np.dtype("<f4"): 0,
    np.dtype("<f8"): 1,
    np.dtype("<i8"): 2,
    np.dtype("uint8"): 3,
    np.dtype("<i4"): 4,
}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


def write_header(f: BinaryIO, magic: bytes, version: int) -> None:
    assert len(magic) == 4
    f.write(magic)
    f.write(struct.pack("<I", version))


def read_header(f: BinaryIO, magic: bytes, path: str | Path) -> int:
    """Check the magic and return the version, or raise ArtifactError."""
    got = f.read(4)
    if got != magic:
        raise ArtifactError(
            f"{path}: bad magic {got!r}, expected {magic!r}"
        )
    raw = f.read(4)
    if len(raw) != 4:
        raise ArtifactError(f"{path}: truncated header")
    return struct.unpack("<I", raw)[0]


def check_version(version: int, supported: int, path: str | Path) -> None:
    if version != supported:
        raise ArtifactError(
            f"{path}: unsupported version {version}, this build reads {supported}"
        )


def write_array(f: BinaryIO, arr: np.ndarray) -> None:
    arr = np.ascontiguousarray(arr)
    dtype = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
    if dtype not in _DTYPE_CODES:
        raise ArtifactError(f"unsupported array dtype {arr.dtype}")
    f.write(struct.pack("<BB", _DTYPE_CODES[dtype], arr.ndim))
    f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    f.write(arr.astype(dtype, copy=False).tobytes())


def read_array(f: BinaryIO, path: str | Path) -> np.ndarray:
    head = f.read(2)
    if len(head) != 2:
        raise ArtifactError(f"{path}: truncated array header")
    code, ndim = struct.unpack("<BB", head)
    if code not in _CODE_DTYPES:
        raise ArtifactError(f"{path}: unknown dtype code {code}")
    shape = struct.unpack(f"<{ndim}Q", f.read(8 * ndim))
    dtype = _CODE_DTYPES[code]
    count = int(np.prod(shape)) if ndim else 1
    raw = f.read(count * dtype.itemsize)
    if len(raw) != count * dtype.itemsize:
        raise ArtifactError(f"{path}: truncated array payload")
    return np.frombuffer(raw, dtype=dtype).reshape(shape).copy()


def write_json_block(f: BinaryIO, obj: dict) -> None:
    data = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")
    f.write(struct.pack("<Q", len(data)))
    f.write(data)


def read_json_block(f: BinaryIO, path: str | Path) -> dict:
    raw = f.read(8)
    if len(raw) != 8:
        raise ArtifactError(f"{path}: truncated metadata block")
    (length,) = struct.unpack("<Q", raw)
    data = f.read(length)
    if len(data) != length:
        raise ArtifactError(f"{path}: truncated metadata block")
    return json.loads(data.decode("utf-8"))
