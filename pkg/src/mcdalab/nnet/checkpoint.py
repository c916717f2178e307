"""Binary model checkpoints.

Layout, little-endian throughout::

    magic   4 bytes  b"BTCK"
    version u16      1
    arch    u32 length + UTF-8 JSON of the Arch fields (sorted keys)
    count   u32      number of parameter blocks
    manifest, per block:
        u16 name length, name bytes (UTF-8)
        u8  ndim, ndim x u32 dims
        u64 byte offset of the block inside the payload
    payload  float64 values of every block, row-major, in manifest order

Parameters are stored as float64 so a save/load round trip is bit-exact.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict
from pathlib import Path

import numpy as np

from ..errors import StorageError
from .model import Arch, ModelBundle

MAGIC = b"BTCK"
VERSION = 1


def checkpoint_bytes(bundle: ModelBundle) -> bytes:
    arch = json.dumps(asdict(bundle.arch), sort_keys=True).encode()
    head = [MAGIC, struct.pack("<HI", VERSION, len(arch)), arch, struct.pack("<I", len(bundle.params))]
    payload, offset = [], 0
    for name, arr in bundle.params.items():
        raw = name.encode()
        head.append(struct.pack("<H", len(raw)) + raw)
        head.append(struct.pack(f"<B{arr.ndim}I", arr.ndim, *arr.shape))
        head.append(struct.pack("<Q", offset))
        data = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        payload.append(data)
        offset += len(data)
    return b"".join(head + payload)


def save_checkpoint(bundle: ModelBundle, path: str | Path) -> None:
    try:
        Path(path).write_bytes(checkpoint_bytes(bundle))
    except OSError as exc:
        raise StorageError("E_IO", str(exc)) from exc


def load_checkpoint(path: str | Path) -> ModelBundle:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise StorageError("E_IO", str(exc)) from exc
    if raw[:4] != MAGIC:
        raise StorageError("E_BAD_MAGIC", f"{path} is not a checkpoint")
    try:
        version, alen = struct.unpack_from("<HI", raw, 4)
        if version != VERSION:
            raise StorageError("E_BAD_VERSION", f"checkpoint version {version}")
        pos = 10
        arch_fields = json.loads(raw[pos:pos + alen])
        pos += alen
        arch_fields["in_shape"] = tuple(arch_fields["in_shape"])
        arch = Arch(**arch_fields)
        (count,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        manifest = []
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", raw, pos)
            name = raw[pos + 2:pos + 2 + nlen].decode()
            pos += 2 + nlen
            (ndim,) = struct.unpack_from("<B", raw, pos)
            shape = struct.unpack_from(f"<{ndim}I", raw, pos + 1)
            pos += 1 + 4 * ndim
            (offset,) = struct.unpack_from("<Q", raw, pos)
            pos += 8
            manifest.append((name, shape, offset))
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError, TypeError) as exc:
        raise StorageError("E_TRUNCATED", f"{path}: corrupt manifest ({exc})") from exc
    params = {}
    for name, shape, offset in manifest:
        count = int(np.prod(shape))
        start = pos + offset
        if start + 8 * count > len(raw):
            raise StorageError("E_TRUNCATED", f"{path}: block {name} runs past end of file")
        params[name] = np.frombuffer(raw, "<f8", count, start).reshape(shape).astype(np.float64)
    return ModelBundle(arch, params)
