"""Binary checkpoint serialization.

Layout (all integers little-endian):

    magic "MMGL" | u32 version=1 | u32 tensor count | tensor records...
    u32 optimizer tensor count | tensor records...
    u32 meta record count | records ("epoch" u32 payload, "rng_state" and
    "config" raw byte payloads)

Each record: u16 name length, name bytes, u8 dtype code (0 = f32 tensor,
1 = raw u8 bytes), u8 rank, u32 dims[rank], payload. Writes are atomic
(temp file + rename); loads validate magic, version, and the shape table
before accepting anything.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"MMGL"
VERSION = 1
DTYPE_F32 = 0
DTYPE_BYTES = 1


class CheckpointError(ValueError):
    """Refusal to read or write a checkpoint (bad magic/version/shape/size)."""


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    opt_state: dict[str, np.ndarray] = field(default_factory=dict)
    epoch: int = 0
    rng_state: dict | None = None
    config_text: str = ""
    version: int = VERSION


def _write_record(out: bytearray, name: str, code: int, dims: tuple[int, ...], payload: bytes):
    nb = name.encode("utf-8")
    if len(nb) > 0xFFFF:
        raise CheckpointError(f"record name too long: {name!r}")
    out += struct.pack("<H", len(nb))
    out += nb
    out += struct.pack("<BB", code, len(dims))
    for d in dims:
        out += struct.pack("<I", d)
    out += payload


def _tensor_record(out: bytearray, name: str, arr: np.ndarray):
    if arr.dtype != np.float32:
        raise CheckpointError(
            f"tensor {name!r} has dtype {arr.dtype}; checkpoints store float32 only"
        )
    _write_record(out, name, DTYPE_F32, arr.shape, arr.astype("<f4").tobytes())


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    """Serialize atomically: write to a temp file in the same directory and
    rename over the target."""
    out = bytearray()
    out += MAGIC
    out += struct.pack("<I", VERSION)
    out += struct.pack("<I", len(ckpt.params))
    for name, arr in ckpt.params.items():
        _tensor_record(out, name, arr)
    out += struct.pack("<I", len(ckpt.opt_state))
    for name, arr in ckpt.opt_state.items():
        _tensor_record(out, name, arr)

    meta: list[tuple[str, bytes]] = [("epoch", struct.pack("<I", ckpt.epoch))]
    if ckpt.rng_state is not None:
        meta.append(("rng_state", json.dumps(ckpt.rng_state, sort_keys=True).encode("utf-8")))
    meta.append(("config", ckpt.config_text.encode("utf-8")))
    out += struct.pack("<I", len(meta))
    for name, payload in meta:
        _write_record(out, name, DTYPE_BYTES, (len(payload),), payload)

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(bytes(out))
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class _Reader:
    def __init__(self, blob: bytes, name: str):
        self.blob = blob
        self.pos = 0
        self.name = name

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise CheckpointError(f"{self.name}: truncated (wanted {n} bytes at {self.pos})")
        chunk = self.blob[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def u16(self) -> int:
        return struct.unpack("<H", self.take(2))[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u8(self) -> int:
        return self.take(1)[0]


def _read_record(r: _Reader) -> tuple[str, int, tuple[int, ...], bytes]:
    name = r.take(r.u16()).decode("utf-8")
    code = r.u8()
    rank = r.u8()
    dims = tuple(r.u32() for _ in range(rank))
    count = int(np.prod(dims)) if dims else 1
    if code == DTYPE_F32:
        payload = r.take(4 * count)
    elif code == DTYPE_BYTES:
        payload = r.take(count)
    else:
        raise CheckpointError(f"{r.name}: unknown dtype code {code} for record {name!r}")
    return name, code, dims, payload


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    r = _Reader(path.read_bytes(), path.name)
    if r.take(4) != MAGIC:
        raise CheckpointError(f"{path.name}: bad magic (not a checkpoint)")
    version = r.u32()
    if version != VERSION:
        raise CheckpointError(f"{path.name}: unsupported version {version} (want {VERSION})")

    def read_tensor_table() -> dict[str, np.ndarray]:
        table: dict[str, np.ndarray] = {}
        count = r.u32()
        for _ in range(count):
            name, code, dims, payload = _read_record(r)
            if code != DTYPE_F32:
                raise CheckpointError(f"{path.name}: tensor record {name!r} has non-f32 dtype")
            if name in table:
                raise CheckpointError(f"{path.name}: duplicate tensor {name!r}")
            table[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float32)
        return table

    params = read_tensor_table()
    opt_state = read_tensor_table()

    epoch = 0
    rng_state = None
    config_text = ""
    for _ in range(r.u32()):
        name, code, _dims, payload = _read_record(r)
        if name == "epoch":
            epoch = struct.unpack("<I", payload)[0]
        elif name == "rng_state":
            rng_state = json.loads(payload.decode("utf-8"))
        elif name == "config":
            config_text = payload.decode("utf-8")
        else:
            raise CheckpointError(f"{path.name}: unknown meta record {name!r}")
    if r.pos != len(r.blob):
        raise CheckpointError(f"{path.name}: {len(r.blob) - r.pos} trailing bytes")
    return Checkpoint(
        params=params,
        opt_state=opt_state,
        epoch=epoch,
        rng_state=rng_state,
        config_text=config_text,
        version=version,
    )
