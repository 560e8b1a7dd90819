"""On-disk formats: the TNS1 tensor container and binary PGM/PPM images.

Tensor files hold a single dense float64 array of rank 1..4:
magic ``TNS1``, rank as u32 little-endian, one u32 per extent, then the
row-major payload as little-endian float64. The format is the carrier for
dataset images, checkpoints, and exported feature maps.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import BinaryIO, Union

import numpy as np

from .errors import FormatError, ShapeError

MAGIC = b"TNS1"
MAX_RANK = 4

PathLike = Union[str, Path]


def tensor_to_bytes(arr: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(arr, dtype=np.float64)
    if arr.ndim < 1 or arr.ndim > MAX_RANK:
        raise ShapeError(f"tensor rank must be 1..{MAX_RANK}, got {arr.ndim}")
    if any(d < 1 for d in arr.shape):
        raise ShapeError(f"tensor extents must be >= 1, got {arr.shape}")
    header = MAGIC + struct.pack("<I", arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + arr.astype("<f8").tobytes()


def tensor_from_stream(fh: BinaryIO) -> np.ndarray:
    magic = fh.read(4)
    if magic != MAGIC:
        raise FormatError(f"bad tensor magic {magic!r}, expected {MAGIC!r}")
    raw = fh.read(4)
    if len(raw) != 4:
        raise FormatError("truncated tensor header")
    (rank,) = struct.unpack("<I", raw)
    if rank < 1 or rank > MAX_RANK:
        raise FormatError(f"tensor rank {rank} outside 1..{MAX_RANK}")
    raw = fh.read(4 * rank)
    if len(raw) != 4 * rank:
        raise FormatError("truncated tensor extents")
    dims = struct.unpack(f"<{rank}I", raw)
    if any(d < 1 for d in dims):
        raise FormatError(f"tensor extents must be >= 1, got {dims}")
    count = int(np.prod(dims))
    payload = fh.read(8 * count)
    if len(payload) != 8 * count:
        raise FormatError("truncated tensor payload")
    return np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(dims)


def write_tensor(path: PathLike, arr: np.ndarray) -> None:
    Path(path).write_bytes(tensor_to_bytes(arr))


def read_tensor(path: PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        arr = tensor_from_stream(fh)
        if fh.read(1):
            raise FormatError(f"{path}: trailing bytes after tensor payload")
    return arr


def write_pgm(path: PathLike, values: np.ndarray) -> None:
    """Write a 2-D uint8 array as binary PGM (P5, maxval 255)."""
    values = np.asarray(values)
    if values.ndim != 2:
        raise ShapeError(f"PGM wants a 2-D array, got shape {values.shape}")
    data = values.astype(np.uint8)
    h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def read_pgm(path: PathLike) -> np.ndarray:
    blob = Path(path).read_bytes()
    fields, offset = _read_header_fields(blob, path, expected_magic=b"P5", count=4)
    _, w, h, maxval = fields
    if maxval != 255:
        raise FormatError(f"{path}: unsupported PGM maxval {maxval}")
    payload = blob[offset : offset + w * h]
    if len(payload) != w * h:
        raise FormatError(f"{path}: truncated PGM payload")
    return np.frombuffer(payload, dtype=np.uint8).reshape(h, w).copy()


def write_ppm(path: PathLike, values: np.ndarray) -> None:
    """Write an (h, w, 3) uint8 array as binary PPM (P6, maxval 255)."""
    values = np.asarray(values)
    if values.ndim != 3 or values.shape[2] != 3:
        raise ShapeError(f"PPM wants an (h, w, 3) array, got shape {values.shape}")
    data = values.astype(np.uint8)
    h, w, _ = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def _read_header_fields(blob: bytes, path: PathLike, expected_magic: bytes, count: int):
    """Parse whitespace-separated header tokens of a binary netpbm file."""
    if not blob.startswith(expected_magic):
        raise FormatError(f"{path}: bad magic, expected {expected_magic!r}")
    fields: list = [expected_magic]
    offset = len(expected_magic)
    while len(fields) < count:
        while offset < len(blob) and blob[offset : offset + 1].isspace():
            offset += 1
        start = offset
        while offset < len(blob) and not blob[offset : offset + 1].isspace():
            offset += 1
        if start == offset:
            raise FormatError(f"{path}: truncated header")
        try:
            fields.append(int(blob[start:offset]))
        except ValueError:
            raise FormatError(f"{path}: non-numeric header token {blob[start:offset]!r}")
    offset += 1  # single whitespace byte separates header from payload
    return fields, offset
