"""Binary checkpoint format.

Layout (little-endian)::

    b"SADU" | u32 version
    u32 n | n bytes  config JSON (sorted keys)
    u64 step
    u32 n_params, then per parameter:
        u16 n | name | u8 ndim | ndim * u32 dims | float32 data
    u8 has_adam, then (if 1):
        u64 t | f64 lr, beta1, beta2, eps | per parameter (same order): m, v as float32
    u8 has_rng, then (if 1): u32 n | n bytes  bit-generator state JSON
    b"END!"
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import ModelConfig

MAGIC = b"SADU"
VERSION = 1
TRAILER = b"END!"


class CheckpointError(ValueError):
    pass


class BadMagicError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0
    lr: float = 5e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class Checkpoint:
    config: ModelConfig
    params: dict[str, np.ndarray]
    adam: AdamState | None = None
    rng_state: dict | None = None
    step: int = 0
    extra: dict = field(default_factory=dict)


def _config_json(cfg: ModelConfig, extra: dict) -> bytes:
    return json.dumps({"model": cfg.to_dict(), "extra": extra}, sort_keys=True).encode()


def dumps(ckpt: Checkpoint) -> bytes:
    out = io.BytesIO()
    w = out.write
    w(MAGIC)
    w(struct.pack("<I", VERSION))
    cfg = _config_json(ckpt.config, ckpt.extra)
    w(struct.pack("<I", len(cfg)) + cfg)
    w(struct.pack("<Q", ckpt.step))
    names = list(ckpt.params)
    w(struct.pack("<I", len(names)))
    for name in names:
        arr = np.ascontiguousarray(ckpt.params[name], dtype="<f4")
        nb = name.encode()
        w(struct.pack("<H", len(nb)) + nb + struct.pack("<B", arr.ndim))
        w(struct.pack(f"<{arr.ndim}I", *arr.shape))
        w(arr.tobytes())
    if ckpt.adam is None:
        w(b"\0")
    else:
        a = ckpt.adam
        w(b"\1" + struct.pack("<Qdddd", a.t, a.lr, a.beta1, a.beta2, a.eps))
        for name in names:
            w(np.ascontiguousarray(a.m[name], dtype="<f4").tobytes())
            w(np.ascontiguousarray(a.v[name], dtype="<f4").tobytes())
    if ckpt.rng_state is None:
        w(b"\0")
    else:
        rs = json.dumps(ckpt.rng_state, sort_keys=True).encode()
        w(b"\1" + struct.pack("<I", len(rs)) + rs)
    w(TRAILER)
    return out.getvalue()


class _Reader:
    def __init__(self, raw: bytes):
        self.raw, self.pos = raw, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise TruncatedCheckpointError(f"checkpoint truncated at byte {len(self.raw)} (needed {self.pos + n})")
        b = self.raw[self.pos:self.pos + n]
        self.pos += n
        return b

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def array(self, shape) -> np.ndarray:
        n = int(np.prod(shape)) if shape else 1
        return np.frombuffer(self.take(4 * n), dtype="<f4").reshape(shape).astype(np.float32)


def loads(raw: bytes) -> Checkpoint:
    r = _Reader(raw)
    if len(raw) >= 4 and raw[:4] != MAGIC:
        raise BadMagicError("not a checkpoint (bad magic)")
    r.take(4)
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise VersionMismatchError(f"checkpoint format version {version}, this build reads {VERSION}")
    (n,) = r.unpack("<I")
    meta = json.loads(r.take(n))
    cfg = ModelConfig.from_dict(meta["model"])
    (step,) = r.unpack("<Q")
    (count,) = r.unpack("<I")
    params = {}
    for _ in range(count):
        (ln,) = r.unpack("<H")
        name = r.take(ln).decode()
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I")
        params[name] = r.array(shape)
    adam = None
    if r.take(1) == b"\1":
        t, lr, b1, b2, eps = r.unpack("<Qdddd")
        m, v = {}, {}
        for name, arr in params.items():
            m[name] = r.array(arr.shape)
            v[name] = r.array(arr.shape)
        adam = AdamState(m, v, t, lr, b1, b2, eps)
    rng_state = None
    if r.take(1) == b"\1":
        (ln,) = r.unpack("<I")
        rng_state = json.loads(r.take(ln))
    if r.take(4) != TRAILER:
        raise CheckpointError("checkpoint trailer missing or corrupt")
    return Checkpoint(cfg, params, adam, rng_state, step, meta.get("extra", {}))


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    Path(path).write_bytes(dumps(ckpt))


def load_checkpoint(path) -> Checkpoint:
    return loads(Path(path).read_bytes())
