"""Single-file parameter checkpoints.

Byte layout (all integers little-endian)::

    magic        8 bytes  b"PRMCKPT\\x00"
    version      u32      currently 1
    model_id     u32 length + UTF-8 bytes
    hyperparams  u32 length + UTF-8 JSON object
    n_tensors    u32
    n_tensors times:
        name     u32 length + UTF-8 bytes
        dtype    u8       4 = float32, 8 = float64
        ndim     u32
        dims     ndim x u64
        payload  prod(dims) little-endian IEEE-754 floats, row-major
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

MAGIC = b"PRMCKPT\x00"
VERSION = 1
_DTYPES = {4: np.dtype("<f4"), 8: np.dtype("<f8")}


class CheckpointError(ValueError):
    pass


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def save_checkpoint(path, model_id: str, tensors: dict[str, np.ndarray], hyperparameters: dict | None = None) -> None:
    parts = [MAGIC, struct.pack("<I", VERSION), _pack_str(model_id)]
    parts.append(_pack_str(json.dumps(hyperparameters or {}, sort_keys=True)))
    parts.append(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        code = arr.dtype.itemsize
        if arr.dtype.kind != "f" or code not in _DTYPES:
            raise CheckpointError(f"tensor {name}: unsupported dtype {arr.dtype}")
        parts.append(_pack_str(name))
        parts.append(struct.pack("<BI", code, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(b"".join(parts))
    os.replace(tmp, path)


def load_checkpoint(path) -> tuple[str, dict, dict[str, np.ndarray]]:
    """Returns ``(model_id, hyperparameters, tensors)``."""
    buf = Path(path).read_bytes()
    if buf[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    pos = 8

    def take(fmt):
        nonlocal pos
        vals = struct.unpack_from(fmt, buf, pos)
        pos += struct.calcsize(fmt)
        return vals

    def take_str():
        nonlocal pos
        (n,) = take("<I")
        s = buf[pos : pos + n].decode("utf-8")
        pos += n
        return s

    try:
        (version,) = take("<I")
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        model_id = take_str()
        hyper = json.loads(take_str())
        (count,) = take("<I")
        tensors = {}
        for _ in range(count):
            name = take_str()
            code, ndim = take("<BI")
            dims = take(f"<{ndim}Q")
            dtype = _DTYPES[code]
            n = int(np.prod(dims)) * dtype.itemsize
            if pos + n > len(buf):
                raise CheckpointError(f"{path}: truncated payload for {name}")
            tensors[name] = np.frombuffer(buf, dtype=dtype, count=int(np.prod(dims)), offset=pos).reshape(dims).astype(dtype.newbyteorder("="))
            pos += n
    except (struct.error, KeyError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt checkpoint ({exc})") from exc
    return model_id, hyper, tensors
