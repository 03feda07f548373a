"""Binary file formats crossing the CLI boundary.

Tensor files ("HMST"): magic, version 0x01, dtype byte (0x01 = little-endian
float32), u8 rank, rank x u32 little-endian extents, row-major payload.

PGM (P5) is used for human-inspectable single-channel maps. Writes are
atomic (temp file + rename) so concurrent readers never see partial files.
"""

import os
import struct
import tempfile

import numpy as np

from .errors import DataError

TENSOR_MAGIC = b"HMST"
TENSOR_VERSION = 1
DTYPE_F32 = 1


def atomic_write(path, payload):
    path = os.fspath(path)
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def tensor_to_bytes(arr):
    arr = np.ascontiguousarray(np.asarray(arr, dtype=np.float32))
    if arr.ndim > 4:
        raise DataError(f"tensor files support rank <= 4, got {arr.ndim}")
    head = TENSOR_MAGIC + struct.pack("<BBB", TENSOR_VERSION, DTYPE_F32, arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + arr.astype("<f4").tobytes()


def write_tensor(path, arr):
    atomic_write(path, tensor_to_bytes(arr))


def tensor_from_stream(f, path="<stream>"):
    start = f.tell()
    magic = f.read(4)
    if magic != TENSOR_MAGIC:
        raise DataError(f"{path}: bad tensor magic {magic!r} at offset {start}")
    hdr = f.read(3)
    if len(hdr) < 3:
        raise DataError(f"{path}: truncated tensor header at offset {start + 4}")
    version, dtype, ndim = struct.unpack("<BBB", hdr)
    if version != TENSOR_VERSION:
        raise DataError(f"{path}: unsupported tensor version {version} at offset {start + 4}")
    if dtype != DTYPE_F32:
        raise DataError(f"{path}: unsupported tensor dtype byte {dtype} at offset {start + 5}")
    if ndim > 4:
        raise DataError(f"{path}: rank {ndim} > 4 at offset {start + 6}")
    raw = f.read(4 * ndim)
    if len(raw) < 4 * ndim:
        raise DataError(f"{path}: truncated extents at offset {start + 7}")
    shape = struct.unpack(f"<{ndim}I", raw)
    if any(s < 1 for s in shape):
        raise DataError(f"{path}: extent < 1 in shape {shape}")
    count = int(np.prod(shape)) if ndim else 1
    payload = f.read(4 * count)
    if len(payload) < 4 * count:
        raise DataError(
            f"{path}: truncated payload at offset {start + 7 + 4 * ndim + len(payload)}")
    return np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float32)


def read_tensor(path):
    with open(path, "rb") as f:
        arr = tensor_from_stream(f, path=os.fspath(path))
        if f.read(1):
            raise DataError(f"{path}: trailing bytes after tensor payload")
        return arr


def write_pgm(path, values):
    """8-bit P5 grayscale; values expected in [0,1], clipped then scaled."""
    v = np.asarray(values, dtype=np.float64)
    if v.ndim == 3 and v.shape[0] == 1:
        v = v[0]
    if v.ndim != 2:
        raise DataError(f"PGM wants a 2-d map, got shape {v.shape}")
    img = np.clip(np.round(v * 255.0), 0, 255).astype(np.uint8)
    header = f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode("ascii")
    atomic_write(path, header + img.tobytes())
