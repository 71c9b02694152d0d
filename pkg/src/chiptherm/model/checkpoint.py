"""Binary checkpoint format.

    offset  size  field
    0       4     magic b"THMW"
    4       4     format version, u32 little-endian
    8       4     header length n, u32
    12      n     UTF-8 JSON: {"arch": ..., "normalization": ..., "param_count": ...}
                  with sorted keys and no extra whitespace
    12+n    8     parameter count, u64
    20+n    8*P   parameters, little-endian f64, in ``param_layout`` order

Writing is deterministic, so identical models give identical files.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .network import ArchConfig, Normalization, SurrogateModel

MAGIC = b"THMW"
VERSION = 1


class CheckpointError(ValueError):
    pass


def to_bytes(model: SurrogateModel) -> bytes:
    header = json.dumps(model.describe(), sort_keys=True, separators=(",", ":")).encode()
    return b"".join([
        MAGIC,
        struct.pack("<II", VERSION, len(header)),
        header,
        struct.pack("<Q", model.param_count),
        model.params.astype("<f8").tobytes(),
    ])


def from_bytes(data: bytes) -> SurrogateModel:
    if data[:4] != MAGIC:
        raise CheckpointError("not a model checkpoint (bad magic)")
    version, n = struct.unpack_from("<II", data, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    meta = json.loads(data[12:12 + n].decode())
    (count,) = struct.unpack_from("<Q", data, 12 + n)
    body = data[20 + n:]
    if len(body) != 8 * count:
        raise CheckpointError(f"expected {count} parameters, found {len(body) // 8}")
    arch = ArchConfig.from_record(meta["arch"])
    norm = Normalization(**meta["normalization"])
    params = np.frombuffer(body, dtype="<f8").astype(np.float64)
    model = SurrogateModel(arch, params, norm)
    if model.param_count != count or meta["param_count"] != count:
        raise CheckpointError("parameter count does not match the architecture")
    return model


def save(model: SurrogateModel, path) -> None:
    Path(path).write_bytes(to_bytes(model))


def load(path) -> SurrogateModel:
    return from_bytes(Path(path).read_bytes())
