"""Bit-exact binary checkpoints.

Layout (all integers little-endian)::

    8 bytes   magic b"FBSCKPT1"
    u16, u16  major, minor version
    u32 + n   metadata text (UTF-8 "key value" lines)
    u32 + n   network spec text
    u32       tensor count, then per tensor:
                u16 + n  name
                u8       rank
                u32 * r  extents
                f64 * prod(extents)  row-major data
    u32       CRC-32 of every byte between the magic and this field

Readers accept any minor version up to their own within the same major.
"""

from __future__ import annotations

import os
import struct
import zlib
from pathlib import Path

import numpy as np

from .network import Network
from .spec import NetworkSpec

MAGIC = b"FBSCKPT1"
VERSION = (1, 1)


class CheckpointError(ValueError):
    pass


def _pack_text(text: str) -> bytes:
    raw = text.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def _meta(net: Network) -> str:
    st = net.rng.bit_generator.state
    if st["bit_generator"] != "PCG64":
        raise CheckpointError(f"only PCG64 generator state can be saved, got {st['bit_generator']}")
    nominal = " ".join(str(l.nominal_channels) for l in net.fbs_layers())
    lines = [
        f"density {net.density!r}",
        f"step {net.step}",
        f"rng_state {st['state']['state']:x}",
        f"rng_inc {st['state']['inc']:x}",
        f"rng_has_uint32 {st['has_uint32']}",
        f"rng_uinteger {st['uinteger']}",
        f"nominal_channels {nominal}",
    ]
    return "\n".join(lines) + "\n"


def serialize(net: Network, version: tuple[int, int] = VERSION) -> bytes:
    body = bytearray(struct.pack("<HH", *version))
    body += _pack_text(_meta(net))
    body += _pack_text(net.spec.to_text())
    tensors = {**{f"param:{k}": v for k, v in net.parameters().items()},
               **{f"buffer:{k}": v for k, v in net.buffers().items()}}
    body += struct.pack("<I", len(tensors))
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        arr = np.ascontiguousarray(arr, dtype="<f8")
        body += struct.pack("<H", len(raw)) + raw
        body += struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
        body += arr.tobytes()
    return MAGIC + bytes(body) + struct.pack("<I", zlib.crc32(body))


def save(net: Network, path) -> None:
    """Write atomically: a failed save never leaves a partial file at ``path``."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(serialize(net))
    os.replace(tmp, path)


class _Reader:
    def __init__(self, data: bytes, offset: int):
        self.data = data
        self.pos = offset

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(f"truncated checkpoint: need {n} bytes at offset {self.pos}")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def text(self) -> str:
        (n,) = self.unpack("<I")
        return self.take(n).decode("utf-8")


def deserialize(data: bytes) -> Network:
    if len(data) < len(MAGIC) + 8:
        raise CheckpointError("file too short to be a checkpoint")
    if data[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"bad magic {data[:len(MAGIC)]!r}")
    r = _Reader(data, len(MAGIC))
    major, minor = r.unpack("<HH")
    if major != VERSION[0] or minor > VERSION[1]:
        raise CheckpointError(f"unsupported checkpoint version {major}.{minor}")
    (crc,) = struct.unpack("<I", data[-4:])
    if zlib.crc32(data[len(MAGIC) : -4]) != crc:
        raise CheckpointError("checksum mismatch: checkpoint is corrupt or truncated")
    r.data = data[:-4]
    meta = {}
    for line in r.text().splitlines():
        key, _, value = line.partition(" ")
        meta[key] = value
    try:
        spec = NetworkSpec.from_text(r.text())
    except (ValueError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"bad network spec in checkpoint: {exc}") from None
    (count,) = r.unpack("<I")
    tensors = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode("utf-8")
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I")
        size = int(np.prod(shape)) if ndim else 1
        tensors[name] = np.frombuffer(r.take(8 * size), dtype="<f8").reshape(shape).astype(np.float64)
    if r.pos != len(r.data):
        raise CheckpointError(f"{len(r.data) - r.pos} unexpected bytes before the checksum")

    net = Network.initialize(spec, seed=0)
    nominal = [int(v) for v in meta.get("nominal_channels", "").split()]
    for layer, nom in zip(net.fbs_layers(), nominal):
        layer.nominal_channels = nom
    params = {k[6:]: v for k, v in tensors.items() if k.startswith("param:")}
    buffers = {k[7:]: v for k, v in tensors.items() if k.startswith("buffer:")}
    try:
        net.load_state(params, buffers)
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"checkpoint tensors do not match its spec: {exc}") from None
    try:
        net.density = float(meta["density"])
        net.step = int(meta["step"])
        net.rng = np.random.Generator(np.random.PCG64())
        net.rng.bit_generator.state = {
            "bit_generator": "PCG64",
            "state": {"state": int(meta["rng_state"], 16), "inc": int(meta["rng_inc"], 16)},
            "has_uint32": int(meta["rng_has_uint32"]),
            "uinteger": int(meta["rng_uinteger"]),
        }
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"bad checkpoint metadata: {exc}") from None
    return net


def load(path) -> Network:
    return deserialize(Path(path).read_bytes())
