"""Binary checkpoint format.

Layout (all integers little-endian)::

    8s   magic b"SFNETCKP"
    u32  format version
    u32  n, then n bytes of UTF-8 JSON: {"config": ..., "epoch": ..., "seed": ...}
    u32  record count, then records
    u8   optimiser flag; if set: u64 step, 4 x f64 (lr, beta1, beta2, eps),
         then the first- and second-moment records
    u32  CRC-32 of everything before it

A record is ``u16 name length, name, u8 ndim, ndim x u32 dims, raw <f4 data``.
Parameters come first, then buffers, in the model's own iteration order.
"""

from __future__ import annotations

import json
import struct
import zlib
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from sfnet.model import SFNet, SFNetConfig
from sfnet.training import OptimState

MAGIC = b"SFNETCKP"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: SFNetConfig
    state: "OrderedDict[str, np.ndarray]"
    epoch: int = 0
    seed: int = 0
    optim: Optional[OptimState] = None

    def build_model(self) -> SFNet:
        model = SFNet(self.config, seed=self.seed)
        expected = model.state_dict()
        for name, arr in self.state.items():
            if name not in expected:
                raise CheckpointError(f"parameter {name!r} does not exist for this config")
            if arr.shape != expected[name].shape:
                raise CheckpointError(
                    f"parameter {name!r} has shape {arr.shape}, config expects {expected[name].shape}")
        missing = [n for n in expected if n not in self.state]
        if missing:
            raise CheckpointError(f"checkpoint lacks parameters {missing[:3]}...")
        model.load_state_dict(self.state)
        model.eval()
        return model


class _Writer:
    def __init__(self):
        self.parts = []

    def pack(self, fmt: str, *values) -> None:
        self.parts.append(struct.pack("<" + fmt, *values))

    def raw(self, b: bytes) -> None:
        self.parts.append(b)

    def record(self, name: str, arr: np.ndarray) -> None:
        encoded = name.encode("utf-8")
        self.pack("H", len(encoded))
        self.raw(encoded)
        self.pack("B", arr.ndim)
        self.pack(f"{arr.ndim}I", *arr.shape)
        self.raw(np.ascontiguousarray(arr, dtype="<f4").tobytes())

    def getvalue(self) -> bytes:
        return b"".join(self.parts)


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise CheckpointError(f"truncated checkpoint: needed {n} bytes at offset {self.pos}")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        fmt = "<" + fmt
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def record(self) -> tuple:
        (n,) = self.unpack("H")
        try:
            name = self.take(n).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointError(f"bad record name at offset {self.pos}") from exc
        (ndim,) = self.unpack("B")
        shape = self.unpack(f"{ndim}I")
        count = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(self.take(4 * count), dtype="<f4").astype(np.float32).reshape(shape)
        return name, arr


def to_bytes(ckpt: Checkpoint) -> bytes:
    w = _Writer()
    w.raw(MAGIC)
    w.pack("I", VERSION)
    header = json.dumps({"config": ckpt.config.to_dict(), "epoch": int(ckpt.epoch),
                         "seed": int(ckpt.seed)}, sort_keys=True, separators=(",", ":"))
    hb = header.encode("utf-8")
    w.pack("I", len(hb))
    w.raw(hb)
    w.pack("I", len(ckpt.state))
    for name, arr in ckpt.state.items():
        w.record(name, arr)
    if ckpt.optim is None:
        w.pack("B", 0)
    else:
        o = ckpt.optim
        w.pack("B", 1)
        w.pack("Q", o.t)
        w.pack("4d", o.lr, o.beta1, o.beta2, o.eps)
        w.pack("I", len(o.m))
        for i, (m, v) in enumerate(zip(o.m, o.v)):
            w.record(f"m.{i}", m)
            w.record(f"v.{i}", v)
    body = w.getvalue()
    return body + struct.pack("<I", zlib.crc32(body))


def from_bytes(blob: bytes) -> Checkpoint:
    r = _Reader(blob)
    if r.take(len(MAGIC)) != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    (version,) = r.unpack("I")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
    (n,) = r.unpack("I")
    raw = r.take(n)
    try:
        header = json.loads(raw.decode("utf-8"))
        config = SFNetConfig.from_dict(header["config"])
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"bad checkpoint header: {exc}") from exc
    (count,) = r.unpack("I")
    state = OrderedDict(r.record() for _ in range(count))
    (flag,) = r.unpack("B")
    optim = None
    if flag:
        (t,) = r.unpack("Q")
        lr, b1, b2, eps = r.unpack("4d")
        (k,) = r.unpack("I")
        ms, vs = [], []
        for _ in range(k):
            ms.append(r.record()[1])
            vs.append(r.record()[1])
        optim = OptimState(ms, vs, lr=lr, beta1=b1, beta2=b2, eps=eps, t=t)
    body_end = r.pos
    (crc,) = r.unpack("I")
    if r.pos != len(blob):
        raise CheckpointError(f"{len(blob) - r.pos} trailing bytes after checkpoint")
    if zlib.crc32(blob[:body_end]) != crc:
        raise CheckpointError("checksum mismatch: checkpoint is corrupted")
    return Checkpoint(config, state, epoch=header.get("epoch", 0), seed=header.get("seed", 0),
                      optim=optim)


def save(path, model: SFNet, epoch: int = 0, seed: int = 0,
         optim: Optional[OptimState] = None) -> Path:
    ckpt = Checkpoint(model.cfg, OrderedDict((k, v.copy()) for k, v in model.state_dict().items()),
                      epoch=epoch, seed=seed, optim=optim)
    path = Path(path)
    path.write_bytes(to_bytes(ckpt))
    return path


def load(path) -> Checkpoint:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return from_bytes(blob)


def write(path, ckpt: Checkpoint) -> Path:
    path = Path(path)
    path.write_bytes(to_bytes(ckpt))
    return path
