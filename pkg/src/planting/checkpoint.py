"""Binary network checkpoints.

Layout, all integers little-endian::

    magic        4s   b"PLNT"
    version      u32  (currently 1)
    header_len   u32
    header       utf-8 JSON: {"spec": {...}, "channels": [...], "blocks": [[...], ...], "meta": {...}}
    n_tensors    u32
    per tensor:
        name_len u16, name utf-8
        ndim     u8,  dims u32 * ndim
        data     float64 little-endian, row-major, prod(dims) values
        frozen   bitmask, prod(dims) bits packed LSB-first, ceil(prod/8) bytes

Writes go to a temporary file in the same directory and are renamed into
place, so readers never see a half-written checkpoint.
"""
from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path
from typing import Optional

import numpy as np

from .gradcore import Tensor
from .model import ArchitectureSpec, ChannelConfig, PlantableNetwork, expected_shapes

MAGIC = b"PLNT"
VERSION = 1


class CheckpointError(ValueError):
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


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def encode_network(net: PlantableNetwork, meta: Optional[dict] = None) -> bytes:
    header = json.dumps(
        {"spec": net.spec.to_dict(), "channels": list(net.channels.conv_channels),
         "blocks": [list(b) for b in net.blocks], "meta": meta or {}},
        sort_keys=True,
    ).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", VERSION, len(header)), header, struct.pack("<I", len(net.params))]
    for name, p in net.params.items():
        raw_name = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw_name)))
        parts.append(raw_name)
        parts.append(struct.pack("<B", p.value.ndim))
        parts.append(struct.pack(f"<{p.value.ndim}I", *p.shape))
        parts.append(np.ascontiguousarray(p.value, dtype="<f8").tobytes())
        parts.append(np.packbits(net.frozen[name].ravel(), bitorder="little").tobytes())
    return b"".join(parts)


def decode_network(data: bytes) -> tuple[PlantableNetwork, dict]:
    view = memoryview(data)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointError("checkpoint is truncated")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    if bytes(take(4)) != MAGIC:
        raise CheckpointError("not a network checkpoint (bad magic)")
    version, header_len = struct.unpack("<II", take(8))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    header = json.loads(bytes(take(header_len)).decode("utf-8"))
    (n_tensors,) = struct.unpack("<I", take(4))
    params: dict[str, Tensor] = {}
    frozen: dict[str, np.ndarray] = {}
    for _ in range(n_tensors):
        (name_len,) = struct.unpack("<H", take(2))
        name = bytes(take(name_len)).decode("utf-8")
        (ndim,) = struct.unpack("<B", take(1))
        dims = struct.unpack(f"<{ndim}I", take(4 * ndim))
        size = int(np.prod(dims)) if dims else 1
        value = np.frombuffer(take(8 * size), dtype="<f8").astype(np.float64).reshape(dims)
        bits = np.frombuffer(take((size + 7) // 8), dtype=np.uint8)
        mask = np.unpackbits(bits, count=size, bitorder="little").astype(bool).reshape(dims)
        params[name] = Tensor(value, requires_grad=True)
        frozen[name] = mask
    if pos != len(view):
        raise CheckpointError("trailing bytes after checkpoint payload")
    spec = ArchitectureSpec.from_dict(header["spec"])
    channels = ChannelConfig(tuple(header["channels"]))
    shapes = {k: p.shape for k, p in params.items()}
    if shapes != expected_shapes(spec, channels):
        raise CheckpointError("tensor shapes do not match the recorded architecture")
    blocks = tuple(tuple(b) for b in header.get("blocks", ()))
    net = PlantableNetwork(spec, channels, params, frozen, blocks)
    return net, header.get("meta", {})


def save_network(net: PlantableNetwork, path, meta: Optional[dict] = None) -> Path:
    path = Path(path)
    atomic_write_bytes(path, encode_network(net, meta))
    return path


def load_network(path) -> tuple[PlantableNetwork, dict]:
    return decode_network(Path(path).read_bytes())
