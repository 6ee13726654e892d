"""LCZNN model files: magic, version, JSON descriptor, then f32le blobs."""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .._io import atomic_write_bytes
from ..errors import ModelFormatError
from .model import Mscnn, MscnnConfig

MAGIC = b"LCZNN"
VERSION = 1
_PREFIX = struct.Struct("<5sII")


def model_to_bytes(model: Mscnn) -> bytes:
    params, buffers = model.parameters(), model.buffers()
    descriptor = {
        "kind": model.kind,
        "config": model.config.to_dict(),
        "freeze_through": model.freeze_through,
        "frozen": model.frozen_flags(),
        "params": [[k, list(v.shape)] for k, v in params.items()],
        "buffers": [[k, list(v.shape)] for k, v in buffers.items()],
    }
    desc = json.dumps(descriptor, separators=(",", ":")).encode()
    blobs = b"".join(np.ascontiguousarray(a, dtype="<f4").tobytes() for a in (*params.values(), *buffers.values()))
    return _PREFIX.pack(MAGIC, VERSION, len(desc)) + desc + blobs


def model_from_bytes(raw: bytes) -> Mscnn:
    from ..transfer import TransferModel

    if len(raw) < _PREFIX.size:
        raise ModelFormatError("truncated model header")
    magic, version, desc_len = _PREFIX.unpack_from(raw)
    if magic != MAGIC:
        raise ModelFormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise ModelFormatError(f"unsupported model version {version}")
    try:
        desc = json.loads(raw[_PREFIX.size:_PREFIX.size + desc_len])
        config = MscnnConfig.from_dict(desc["config"])
        cls = {"mscnn": Mscnn, "transfer": TransferModel}[desc["kind"]]
    except (KeyError, ValueError, TypeError) as exc:
        raise ModelFormatError(f"bad model descriptor: {exc}") from exc
    model = cls(config, seed=0, freeze_through=desc["freeze_through"])
    state = {}
    offset = _PREFIX.size + desc_len
    expected = {**model.parameters(), **model.buffers()}
    for name, shape in (*desc["params"], *desc["buffers"]):
        if name not in expected or tuple(shape) != expected[name].shape:
            raise ModelFormatError(f"descriptor entry {name} {shape} does not fit the architecture")
        nbytes = int(np.prod(shape)) * 4
        if offset + nbytes > len(raw):
            raise ModelFormatError("truncated parameter payload")
        state[name] = np.frombuffer(raw, dtype="<f4", count=int(np.prod(shape)), offset=offset).reshape(shape)
        offset += nbytes
    if offset != len(raw):
        raise ModelFormatError("trailing bytes after parameter payload")
    if set(state) != set(expected):
        raise ModelFormatError("model file lacks some parameters")
    model.load_state(state)
    return model


def save_model(model: Mscnn, path) -> None:
    atomic_write_bytes(path, model_to_bytes(model))


def load_model(path) -> Mscnn:
    return model_from_bytes(Path(path).read_bytes())
