"""Binary tensor files and PPM images.

Tensor file layout (shared by features, visual embeddings, and checkpoint
payloads): magic ``MMT1``, u32 rank, u64 extents, one dtype byte
(0 = f32, 1 = f64), then the row-major little-endian payload.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import DataError

_MAGIC = b"MMT1"
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


def write_tensor(path, array: np.ndarray) -> None:
    arr = np.ascontiguousarray(array)
    if arr.dtype not in _DTYPE_CODES:
        arr = arr.astype(np.float32)
    code = _DTYPE_CODES[arr.dtype]
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<I", arr.ndim))
        f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        f.write(struct.pack("<B", code))
        f.write(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())


def read_tensor(path) -> np.ndarray:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read tensor file {path}: {exc}") from exc
    if len(raw) < 9 or raw[:4] != _MAGIC:
        raise DataError(f"{path}: not a tensor file (bad magic)")
    (rank,) = struct.unpack_from("<I", raw, 4)
    off = 8
    if rank > 8:
        raise DataError(f"{path}: implausible rank {rank}")
    shape = struct.unpack_from(f"<{rank}Q", raw, off)
    off += 8 * rank
    (code,) = struct.unpack_from("<B", raw, off)
    off += 1
    if code not in _CODE_DTYPES:
        raise DataError(f"{path}: unknown dtype code {code}")
    dtype = _CODE_DTYPES[code]
    count = int(np.prod(shape, dtype=np.int64)) if rank else 1
    expected = off + count * dtype.itemsize
    if len(raw) != expected:
        raise DataError(f"{path}: payload size {len(raw) - off}, expected {expected - off}")
    return np.frombuffer(raw, dtype=dtype, count=count, offset=off).reshape(shape).copy()


def write_ppm(path, pixels: np.ndarray) -> None:
    """Write an H x W x 3 float image in [0,1] as binary 8-bit PPM (P6)."""
    if pixels.ndim != 3 or pixels.shape[2] != 3:
        raise DataError(f"PPM expects H x W x 3 pixels, got {pixels.shape}")
    h, w, _ = pixels.shape
    data = np.clip(np.round(pixels * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(data.tobytes())


def read_ppm(path) -> np.ndarray:
    """Read a binary 8-bit PPM (P6) into an H x W x 3 float array in [0,1]."""
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc
    if not raw.startswith(b"P6"):
        raise DataError(f"{path}: only binary PPM (P6) images are supported")

    # Header: "P6", width, height, maxval as whitespace-separated tokens,
    # with '#' comments allowed between them.
    tokens, pos = [], 2
    while len(tokens) < 3:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DataError(f"{path}: truncated PPM header")
        tokens.append(raw[start:pos])
    pos += 1  # single whitespace after maxval
    try:
        w, h, maxval = (int(t) for t in tokens)
    except ValueError as exc:
        raise DataError(f"{path}: malformed PPM header") from exc
    if maxval != 255:
        raise DataError(f"{path}: only maxval 255 supported, got {maxval}")
    need = w * h * 3
    payload = raw[pos : pos + need]
    if len(payload) != need:
        raise DataError(f"{path}: expected {need} pixel bytes, got {len(payload)}")
    img = np.frombuffer(payload, dtype=np.uint8).reshape(h, w, 3)
    return img.astype(np.float64) / 255.0
