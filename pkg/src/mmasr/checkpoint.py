"""Binary checkpoint files: parameters, component tags, feature statistics.

Layout: magic ``MMCK``, u32 format version, metadata strings, optional
per-mel-bin normalization statistics, then one record per parameter
(name length + name, component tag, trainable flag, dtype, rank, extents,
raw little-endian values). Everything needed to decode is inside the file.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Parameter
from .errors import CheckpointError

MAGIC = b"MMCK"
VERSION = 1

_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


@dataclass
class ParamRecord:
    name: str
    component: str
    trainable: bool
    data: np.ndarray


@dataclass
class Checkpoint:
    params: dict[str, ParamRecord]
    feature_stats: tuple[np.ndarray, np.ndarray] | None = None  # (mean, std)
    metadata: dict[str, str] = field(default_factory=dict)

    def component_names(self, component: str) -> list[str]:
        return [r.name for r in self.params.values() if r.component == component]


def _pack_str(s: str, width: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack(f"<{width}", len(raw)) + raw


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    chunks = [MAGIC, struct.pack("<I", VERSION)]
    chunks.append(struct.pack("<I", len(ckpt.metadata)))
    for key in sorted(ckpt.metadata):
        chunks.append(_pack_str(key, "H"))
        chunks.append(_pack_str(ckpt.metadata[key], "I"))
    if ckpt.feature_stats is not None:
        mean, std = ckpt.feature_stats
        chunks.append(struct.pack("<BI", 1, mean.size))
        chunks.append(mean.astype("<f8").tobytes())
        chunks.append(std.astype("<f8").tobytes())
    else:
        chunks.append(struct.pack("<BI", 0, 0))
    chunks.append(struct.pack("<I", len(ckpt.params)))
    for record in ckpt.params.values():
        arr = np.ascontiguousarray(record.data)
        if arr.dtype not in _DTYPE_CODES:
            raise CheckpointError(f"{record.name}: unsupported dtype {arr.dtype}")
        chunks.append(_pack_str(record.name, "H"))
        chunks.append(
            struct.pack(
                "<BBBI",
                Parameter.COMPONENTS.index(record.component),
                int(record.trainable),
                _DTYPE_CODES[arr.dtype],
                arr.ndim,
            )
        )
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())
    Path(path).write_bytes(b"".join(chunks))


class _Reader:
    def __init__(self, raw: bytes, path):
        self.raw, self.pos, self.path = raw, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise CheckpointError(f"{self.path}: truncated checkpoint")
        out = self.raw[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path) -> Checkpoint:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    r = _Reader(raw, path)
    if r.take(4) != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")

    (n_meta,) = r.unpack("<I")
    metadata = {}
    for _ in range(n_meta):
        (klen,) = r.unpack("<H")
        key = r.take(klen).decode("utf-8")
        (vlen,) = r.unpack("<I")
        metadata[key] = r.take(vlen).decode("utf-8")

    has_stats, dim = r.unpack("<BI")
    stats = None
    if has_stats:
        mean = np.frombuffer(r.take(8 * dim), dtype="<f8").copy()
        std = np.frombuffer(r.take(8 * dim), dtype="<f8").copy()
        stats = (mean, std)

    (n_params,) = r.unpack("<I")
    params: dict[str, ParamRecord] = {}
    for _ in range(n_params):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode("utf-8")
        comp_code, trainable, dtype_code, rank = r.unpack("<BBBI")
        if comp_code >= len(Parameter.COMPONENTS) or dtype_code not in _CODE_DTYPES:
            raise CheckpointError(f"{path}: corrupt record for {name!r}")
        shape = r.unpack(f"<{rank}Q") if rank else ()
        dtype = _CODE_DTYPES[dtype_code]
        count = int(np.prod(shape, dtype=np.int64)) if rank else 1
        data = np.frombuffer(r.take(count * dtype.itemsize), dtype=dtype)
        params[name] = ParamRecord(
            name=name,
            component=Parameter.COMPONENTS[comp_code],
            trainable=bool(trainable),
            data=data.reshape(shape).copy(),
        )
    if r.pos != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - r.pos} trailing bytes")
    return Checkpoint(params=params, feature_stats=stats, metadata=metadata)
