"""Binary checkpoint format.

Layout (little endian)::

    b"OGFRCKP1"  u32 version  u64 n_tensors
    n_tensors x { u32 name_len, name (utf-8), u8 dtype, u8 rank, rank x u64 dim, payload }
    trailer: u64 epoch, u64 step, f64 baseline, u64 json_len, json
             (json holds the RNG state, config and config hash)
"""

from __future__ import annotations

import json
import os
import struct
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from .errors import CheckpointError, FormatError

MAGIC = b"OGFRCKP1"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8"), 3: np.dtype("u1")}


@dataclass
class Checkpoint:
    tensors: "OrderedDict[str, np.ndarray]"
    epoch: int = 0
    step: int = 0
    baseline: float = 0.0
    extra: dict = field(default_factory=dict)

    @property
    def config_hash(self):
        return self.extra.get("config_hash")


def _code(arr: np.ndarray) -> int:
    for code, ref in _DTYPES.items():
        if arr.dtype.kind == ref.kind and arr.dtype.itemsize == ref.itemsize:
            return code
    raise FormatError(f"unsupported dtype {arr.dtype}")


def to_bytes(ckpt: Checkpoint) -> bytes:
    out = [MAGIC, struct.pack("<IQ", VERSION, len(ckpt.tensors))]
    for name, arr in ckpt.tensors.items():
        arr = np.asarray(arr)
        code = _code(arr)
        raw = name.encode("utf-8")
        out.append(struct.pack("<I", len(raw)) + raw)
        out.append(struct.pack("<BB", code, arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    blob = json.dumps(ckpt.extra, sort_keys=True, separators=(",", ":")).encode("utf-8")
    out.append(struct.pack("<QQdQ", ckpt.epoch, ckpt.step, ckpt.baseline, len(blob)) + blob)
    return b"".join(out)


def from_bytes(data: bytes) -> Checkpoint:
    if data[:8] != MAGIC:
        raise FormatError("not a checkpoint (bad magic)")
    try:
        version, count = struct.unpack_from("<IQ", data, 8)
        if version != VERSION:
            raise FormatError(f"unsupported checkpoint version {version}")
        pos = 20
        tensors = OrderedDict()
        for _ in range(count):
            (n,) = struct.unpack_from("<I", data, pos)
            pos += 4
            name = data[pos:pos + n].decode("utf-8")
            pos += n
            code, rank = struct.unpack_from("<BB", data, pos)
            pos += 2
            if code not in _DTYPES:
                raise FormatError(f"tensor {name!r}: unknown dtype code {code}")
            shape = struct.unpack_from(f"<{rank}Q", data, pos)
            pos += 8 * rank
            dt = _DTYPES[code]
            nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
            if pos + nbytes > len(data):
                raise FormatError(f"tensor {name!r}: payload truncated")
            tensors[name] = np.frombuffer(data, dtype=dt, count=nbytes // dt.itemsize,
                                          offset=pos).reshape(shape).copy()
            pos += nbytes
        epoch, step, baseline, n = struct.unpack_from("<QQdQ", data, pos)
        pos += 32
        if pos + n != len(data):
            raise FormatError("checkpoint trailer length mismatch")
        extra = json.loads(data[pos:pos + n].decode("utf-8"))
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"corrupt checkpoint: {exc}") from None
    return Checkpoint(tensors, int(epoch), int(step), float(baseline), extra)


def save(ckpt: Checkpoint, path) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(to_bytes(ckpt))
    os.replace(tmp, path)


def load(path) -> Checkpoint:
    with open(path, "rb") as fh:
        return from_bytes(fh.read())


def load_params(params, tensors, prefix="") -> None:
    """Copy named arrays into ``params``; every parameter must be present and match."""
    for name, t in params.items():
        key = prefix + name
        if key not in tensors:
            raise CheckpointError(f"checkpoint is missing tensor {key!r}")
        arr = tensors[key]
        if arr.shape != t.shape:
            raise CheckpointError(f"tensor {key!r} has shape {arr.shape}, model expects {t.shape}")
        t.data = arr.astype(t.dtype, copy=True)
