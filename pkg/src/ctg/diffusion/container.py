"""Binary tensor container shared by checkpoints and dataset shards.

Layout: magic ``CTGCKPT1`` (8 bytes), u32 little-endian header length, UTF-8
JSON header, then a contiguous little-endian float32 payload. The header's
``tensors`` table maps name -> {"shape", "dtype": "f32", "offset"} with byte
offsets relative to the start of the payload.
"""
from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

MAGIC = b"CTGCKPT1"


class ContainerError(ValueError):
    pass


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def encode(header: dict, tensors: dict[str, np.ndarray]) -> bytes:
    table = {}
    chunks = []
    offset = 0
    for name, arr in tensors.items():
        a = np.ascontiguousarray(arr, dtype="<f4")
        table[name] = {"shape": list(a.shape), "dtype": "f32", "offset": offset}
        chunks.append(a.tobytes())
        offset += a.nbytes
    head = json.dumps({**header, "tensors": table}, sort_keys=True).encode("utf-8")
    return MAGIC + struct.pack("<I", len(head)) + head + b"".join(chunks)


def decode(data: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if data[:8] != MAGIC:
        raise ContainerError("not a CTG container (bad magic)")
    if len(data) < 12:
        raise ContainerError("truncated container header")
    (n,) = struct.unpack("<I", data[8:12])
    try:
        header = json.loads(data[12 : 12 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ContainerError(f"corrupt container header: {e}") from None
    payload = memoryview(data)[12 + n :]
    tensors = {}
    for name, info in header.pop("tensors").items():
        if info["dtype"] != "f32":
            raise ContainerError(f"tensor {name}: unsupported dtype {info['dtype']}")
        count = int(np.prod(info["shape"], dtype=np.int64))
        end = info["offset"] + 4 * count
        if end > len(payload):
            raise ContainerError(f"tensor {name} runs past the end of the payload")
        arr = np.frombuffer(payload[info["offset"] : end], dtype="<f4").reshape(info["shape"])
        tensors[name] = arr.copy()
    return header, tensors


def save(path, header: dict, tensors: dict[str, np.ndarray]) -> None:
    atomic_write_bytes(path, encode(header, tensors))


def load(path) -> tuple[dict, dict[str, np.ndarray]]:
    return decode(Path(path).read_bytes())
