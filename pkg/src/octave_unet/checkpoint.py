"""Portable binary checkpoint format.

Layout (all integers unsigned 64-bit little-endian)::

    b"OCTV1"
    u64 config_length, config_length bytes of UTF-8 JSON (model config + "kind")
    u64 tensor_count
    tensor_count x record:
        u64 name_length, name bytes (UTF-8)
        u64 rank, rank x u64 extents
        prod(extents) x float32 little-endian

Records appear in registration order: parameters, then buffers.
"""

from __future__ import annotations

import io
import json
import os
import struct
from typing import Union

import numpy as np

from .errors import CheckpointError, ConfigError
from .unet import BaselineUNet, ModelConfig, OctaveUNet, UNet

MAGIC = b"OCTV1"
_U64 = struct.Struct("<Q")
PathLike = Union[str, os.PathLike]


def _model_kind(model: UNet) -> str:
    return "baseline" if isinstance(model, BaselineUNet) else "octave"


def dumps(model: UNet) -> bytes:
    buf = io.BytesIO()
    header = dict(model.config.to_dict(), kind=_model_kind(model))
    text = json.dumps(header, sort_keys=True).encode("utf-8")
    buf.write(MAGIC)
    buf.write(_U64.pack(len(text)))
    buf.write(text)
    state = model.state_dict()
    buf.write(_U64.pack(len(state)))
    for name, arr in state.items():
        raw = name.encode("utf-8")
        buf.write(_U64.pack(len(raw)))
        buf.write(raw)
        buf.write(_U64.pack(arr.ndim))
        for extent in arr.shape:
            buf.write(_U64.pack(extent))
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return buf.getvalue()


def save(model: UNet, path: PathLike) -> None:
    data = dumps(model)
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if n < 0 or self.pos + n > len(self.data):
            raise CheckpointError(
                f"truncated checkpoint: need {n} bytes for {what} at offset {self.pos}, "
                f"only {len(self.data) - self.pos} left"
            )
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u64(self, what: str) -> int:
        return _U64.unpack(self.take(8, what))[0]


def loads(data: bytes, dtype=np.float32) -> UNet:
    r = _Reader(data)
    if r.take(len(MAGIC), "magic") != MAGIC:
        raise CheckpointError(f"bad magic: expected {MAGIC!r}, got {data[:len(MAGIC)]!r}")
    try:
        header = json.loads(r.take(r.u64("config length"), "config").decode("utf-8"))
        kind = header.pop("kind", "octave")
        config = ModelConfig.from_dict(header)
    except (UnicodeDecodeError, json.JSONDecodeError, ConfigError, TypeError) as exc:
        raise CheckpointError(f"invalid config block: {exc}") from None
    cls = {"octave": OctaveUNet, "baseline": BaselineUNet}.get(kind)
    if cls is None:
        raise CheckpointError(f"unknown model kind {kind!r}")
    model = cls(config, rng=np.random.default_rng(0), dtype=dtype)
    expected = {name: arr.shape for name, arr in model.state_dict().items()}

    count = r.u64("tensor count")
    if count != len(expected):
        raise CheckpointError(f"config implies {len(expected)} tensors, file has {count}")
    state = {}
    for _ in range(count):
        name = r.take(r.u64("name length"), "name").decode("utf-8", errors="replace")
        rank = r.u64(f"rank of {name}")
        if rank > 8:
            raise CheckpointError(f"{name}: implausible rank {rank}")
        shape = tuple(r.u64(f"extent of {name}") for _ in range(rank))
        if name not in expected:
            raise CheckpointError(f"unexpected tensor {name!r} for this config")
        if shape != expected[name]:
            raise CheckpointError(f"{name}: shape {shape} inconsistent with config (expected {expected[name]})")
        nbytes = 4 * int(np.prod(shape, dtype=np.int64))
        state[name] = np.frombuffer(r.take(nbytes, f"data of {name}"), dtype="<f4").reshape(shape)
    if r.pos != len(data):
        raise CheckpointError(f"{len(data) - r.pos} trailing bytes after last tensor")
    model.load_state_dict(state)
    return model


def load(path: PathLike, dtype=np.float32) -> UNet:
    with open(path, "rb") as fh:
        return loads(fh.read(), dtype=dtype)
