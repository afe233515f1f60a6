"""Binary checkpoint files (``JDCM``).

Layout, little-endian::

    magic "JDCM" | version u16 | json_len u32 | json (utf-8)
    then records until end of file:
    name_len u16 | name | dtype u8 | rank u8 | extents u32 * rank | raw values

The JSON header carries the architecture, quality and metric tags, plus an
optional free-form ``extra`` dict (the trainer stores its epoch counter and
generator state there). Optimizer moments are saved as a second file in the
same format with names ``m/<param>`` and ``v/<param>``.
"""
from __future__ import annotations

import json
import os
import struct
from pathlib import Path
from typing import Dict, Optional, Tuple

import numpy as np

from .model import ArchConfig, CodecModel

MAGIC = b"JDCM"
VERSION = 1
DTYPE_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1, np.dtype("<i4"): 2, np.dtype("<i8"): 3, np.dtype("u1"): 4}
CODE_DTYPES = {v: k for k, v in DTYPE_CODES.items()}


class CheckpointError(ValueError):
    """Unreadable or incompatible checkpoint."""


def dump_records(header: dict, arrays: Dict[str, np.ndarray]) -> bytes:
    meta = json.dumps(header, sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<HI", VERSION, len(meta)), meta]
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
        if np.dtype(dt) not in DTYPE_CODES:
            raise TypeError(f"cannot store dtype {arr.dtype} for {name!r}")
        key = name.encode()
        parts.append(struct.pack("<H", len(key)) + key)
        parts.append(struct.pack("<BB", DTYPE_CODES[np.dtype(dt)], arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=dt).tobytes())
    return b"".join(parts)


def load_records(data: bytes) -> Tuple[dict, Dict[str, np.ndarray]]:
    if data[:4] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    try:
        version, n = struct.unpack_from("<HI", data, 4)
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        pos = 10
        header = json.loads(data[pos : pos + n].decode())
        pos += n
        arrays: Dict[str, np.ndarray] = {}
        while pos < len(data):
            (k,) = struct.unpack_from("<H", data, pos)
            name = data[pos + 2 : pos + 2 + k].decode()
            pos += 2 + k
            code, rank = struct.unpack_from("<BB", data, pos)
            pos += 2
            shape = struct.unpack_from(f"<{rank}I", data, pos)
            pos += 4 * rank
            dt = CODE_DTYPES[code]
            size = int(np.prod(shape)) * dt.itemsize
            if pos + size > len(data):
                raise CheckpointError(f"record {name!r} is truncated")
            arrays[name] = np.frombuffer(data, dt, int(np.prod(shape)), pos).reshape(shape).copy()
            pos += size
    except (struct.error, KeyError, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"malformed checkpoint: {exc}") from exc
    return header, arrays


def _write_atomic(path: Path, payload: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(payload)
    os.replace(tmp, path)


def save_model(model: CodecModel, path, extra: Optional[dict] = None) -> None:
    header = model.header()
    if extra:
        header["extra"] = extra
    _write_atomic(Path(path), dump_records(header, model.state_dict()))


def model_to_bytes(model: CodecModel) -> bytes:
    return dump_records(model.header(), model.state_dict())


def load_model(path) -> Tuple[CodecModel, dict]:
    """Rebuild a model from a checkpoint; returns (model, extra)."""
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    header, arrays = load_records(data)
    try:
        arch = ArchConfig.from_dict(header["arch"])
        model = CodecModel(arch, header["quality"], header["metric"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"bad checkpoint header: {exc}") from exc
    dtypes = {a.dtype for a in arrays.values()}
    if len(dtypes) == 1:
        model.to(dtypes.pop())
    try:
        model.load_state_dict(arrays)
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"checkpoint parameters do not fit the architecture: {exc}") from exc
    return model, header.get("extra", {})
