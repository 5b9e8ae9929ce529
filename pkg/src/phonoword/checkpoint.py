"""Single-file checkpoint container.

Layout (all integers little-endian)::

    b"PWCK" | u32 format version | u32 header length | header JSON
    then one block per parameter, sorted by name:
    u16 name length | name (utf-8) | u8 ndim | u32 x ndim shape | float64 values

The JSON header carries the component tag, the full run-config echo, the
model config used to rebuild parameter shapes, and free-form metadata such
as vocabularies. Encoding is canonical (sorted keys, sorted blocks), so
save -> load -> save reproduces the file byte for byte.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"PWCK"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    component: str
    config: dict
    model_config: dict
    meta: dict
    params: dict[str, np.ndarray]


def encode(ckpt: Checkpoint) -> bytes:
    header = {
        "format_version": FORMAT_VERSION,
        "component": ckpt.component,
        "config": ckpt.config,
        "model_config": ckpt.model_config,
        "meta": ckpt.meta,
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(hbytes)), hbytes]
    for name in sorted(ckpt.params):
        arr = np.ascontiguousarray(ckpt.params[name], dtype="<f8")
        nb = name.encode("utf-8")
        parts.append(struct.pack("<H", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def decode(data: bytes, source: str = "<bytes>") -> Checkpoint:
    if data[:4] != MAGIC:
        raise CheckpointError(f"{source}: not a checkpoint file")
    version, hlen = struct.unpack_from("<II", data, 4)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{source}: unsupported checkpoint version {version}")
    off = 12
    header = json.loads(data[off:off + hlen].decode("utf-8"))
    off += hlen
    params: dict[str, np.ndarray] = {}
    try:
        while off < len(data):
            (nlen,) = struct.unpack_from("<H", data, off)
            off += 2
            name = data[off:off + nlen].decode("utf-8")
            off += nlen
            (ndim,) = struct.unpack_from("<B", data, off)
            off += 1
            shape = struct.unpack_from(f"<{ndim}I", data, off)
            off += 4 * ndim
            count = int(np.prod(shape)) if ndim else 1
            end = off + 8 * count
            if end > len(data):
                raise CheckpointError(f"{source}: truncated block {name!r}")
            params[name] = np.frombuffer(data[off:end], dtype="<f8").reshape(shape).astype(np.float64)
            off = end
    except struct.error as exc:
        raise CheckpointError(f"{source}: corrupt parameter block ({exc})") from exc
    return Checkpoint(header["component"], header["config"], header["model_config"],
                      header.get("meta", {}), params)


def save(path: str | Path, ckpt: Checkpoint) -> None:
    Path(path).write_bytes(encode(ckpt))


def load(path: str | Path, component: str | None = None) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint {path} does not exist")
    ckpt = decode(path.read_bytes(), str(path))
    if component is not None and ckpt.component != component:
        raise CheckpointError(f"{path}: expected a {component} checkpoint, found {ckpt.component}")
    return ckpt
