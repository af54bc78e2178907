"""Binary checkpoints.

Layout (all integers little-endian)::

    b"TALR1"                      magic
    u32   format version          (currently 1)
    32 B  sha256 of the config's canonical JSON
    u32   config length, then that many bytes of canonical JSON (UTF-8)
    u32   blob count, then per blob:
            u16 name length, name (UTF-8)
            u8  ndim, ndim x u32 dims
            prod(dims) x f64 values, row-major
    u8    1 if optimizer state follows, else 0
          u64 step, then m blobs and v blobs in the format above
          (u32 count each)
    32 B  sha256 of every preceding byte

Loading checks the magic, version, config digest and trailing hash before
returning anything, so a damaged file never yields a partial model.
"""

from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from .adapter import LoraPair, LoraPerTask, LoraShared, TuckerFactors

__all__ = [
    "MAGIC",
    "FORMAT_VERSION",
    "Checkpoint",
    "CheckpointError",
    "save_checkpoint",
    "load_checkpoint",
    "encode_checkpoint",
    "decode_checkpoint",
    "restore_params",
]

MAGIC = b"TALR1"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config_json: str
    params: dict[str, np.ndarray]
    opt_step: int | None = None
    opt_m: dict[str, np.ndarray] = field(default_factory=dict)
    opt_v: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def config_digest(self) -> bytes:
        return hashlib.sha256(self.config_json.encode()).digest()

    @property
    def config(self) -> dict:
        return json.loads(self.config_json)


def _named_arrays(obj) -> dict[str, np.ndarray]:
    if isinstance(obj, Mapping):
        return dict(obj)
    if isinstance(obj, (TuckerFactors, LoraPair, LoraPerTask, LoraShared)):
        return dict(obj.named_params())
    if hasattr(obj, "trainable_params"):
        return obj.trainable_params()
    raise TypeError(f"cannot checkpoint object of type {type(obj).__name__}")


def _write_blobs(buf: io.BytesIO, arrays: Mapping[str, np.ndarray]) -> None:
    buf.write(struct.pack("<I", len(arrays)))
    for name, arr in arrays.items():
        raw = name.encode()
        a = np.asarray(arr)
        if a.ndim > 255 or len(raw) > 0xFFFF:
            raise CheckpointError(f"{name}: name or rank too large for the format")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", a.ndim))
        buf.write(struct.pack(f"<{a.ndim}I", *a.shape))
        buf.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("truncated checkpoint")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def blobs(self) -> dict[str, np.ndarray]:
        (count,) = self.unpack("<I")
        out = {}
        for _ in range(count):
            (n,) = self.unpack("<H")
            try:
                name = self.take(n).decode()
            except UnicodeDecodeError:
                raise CheckpointError("corrupt parameter name") from None
            (ndim,) = self.unpack("<B")
            shape = self.unpack(f"<{ndim}I")
            size = int(np.prod(shape, dtype=np.int64))
            arr = np.frombuffer(self.take(8 * size), dtype="<f8").astype(np.float64)
            if name in out:
                raise CheckpointError(f"duplicate parameter {name!r}")
            out[name] = arr.reshape(shape)
        return out


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", FORMAT_VERSION))
    cfg = ckpt.config_json.encode()
    buf.write(hashlib.sha256(cfg).digest())
    buf.write(struct.pack("<I", len(cfg)))
    buf.write(cfg)
    _write_blobs(buf, ckpt.params)
    if ckpt.opt_step is None:
        buf.write(b"\x00")
    else:
        buf.write(b"\x01")
        buf.write(struct.pack("<Q", ckpt.opt_step))
        _write_blobs(buf, ckpt.opt_m)
        _write_blobs(buf, ckpt.opt_v)
    body = buf.getvalue()
    return body + hashlib.sha256(body).digest()


def decode_checkpoint(data: bytes, expected_digest: bytes | None = None) -> Checkpoint:
    if len(data) < len(MAGIC) or data[:len(MAGIC)] != MAGIC:
        raise CheckpointError("bad magic: not a checkpoint file")
    if len(data) < len(MAGIC) + 4 + 32:
        raise CheckpointError("truncated checkpoint")
    r = _Reader(data)
    r.take(len(MAGIC))
    (version,) = r.unpack("<I")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported format version {version} (expected {FORMAT_VERSION})")
    body, tail = data[:-32], data[-32:]
    if hashlib.sha256(body).digest() != tail:
        raise CheckpointError("checksum mismatch: file is truncated or corrupted")
    r = _Reader(body)
    r.take(len(MAGIC) + 4)
    digest = r.take(32)
    (n,) = r.unpack("<I")
    cfg = r.take(n)
    if hashlib.sha256(cfg).digest() != digest:
        raise CheckpointError("config digest does not match embedded config")
    if expected_digest is not None and digest != expected_digest:
        raise CheckpointError("config digest mismatch: checkpoint was written for a different config")
    params = r.blobs()
    (flag,) = r.unpack("<B")
    ckpt = Checkpoint(cfg.decode(), params)
    if flag == 1:
        (ckpt.opt_step,) = r.unpack("<Q")
        ckpt.opt_m = r.blobs()
        ckpt.opt_v = r.blobs()
    elif flag != 0:
        raise CheckpointError("corrupt optimizer flag")
    if r.pos != len(body):
        raise CheckpointError("trailing bytes after checkpoint payload")
    return ckpt


def save_checkpoint(obj, path, config_json: str = "{}", state=None) -> Checkpoint:
    """Write the parameters of ``obj`` (model, adapter or name->array map).

    ``state`` is an optional :class:`~talora.grad.AdamState` to embed.
    """
    if isinstance(obj, Checkpoint):
        ckpt = obj
    else:
        ckpt = Checkpoint(config_json, _named_arrays(obj))
        if state is not None:
            ckpt.opt_step = int(state.step)
            ckpt.opt_m = {k: state.m[k] for k in ckpt.params if k in state.m}
            ckpt.opt_v = {k: state.v[k] for k in ckpt.params if k in state.v}
    data = encode_checkpoint(ckpt)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)
    return ckpt


def load_checkpoint(path, expected_digest: bytes | None = None) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"{path}: no such checkpoint")
    return decode_checkpoint(path.read_bytes(), expected_digest)


def restore_params(model, ckpt: Checkpoint) -> None:
    """Copy checkpoint values into ``model`` in place; names and shapes must match."""
    params = _named_arrays(model)
    if list(params) != list(ckpt.params):
        missing = sorted(set(params) ^ set(ckpt.params))
        raise CheckpointError(f"parameter names differ from the model: {missing[:3]}")
    for name, arr in params.items():
        src = ckpt.params[name]
        if src.shape != arr.shape:
            raise CheckpointError(f"{name}: shape {src.shape} != model {arr.shape}")
    for name, arr in params.items():
        arr[...] = ckpt.params[name]
