"""Binary checkpoint format (little-endian throughout).

Layout:

    magic           4 bytes  b"BALN"
    version         u32      currently 1
    iteration       u32
    config digest   32 bytes sha256 of the canonical model-config text
    config text     u32 length + utf-8 bytes (lets eval rebuild the model)
    parameters      tensor section
    momentum        tensor section (may be empty)
    bn stats        tensor section (running mean/var per BN layer)

A tensor section is a u32 entry count followed by entries of
`u32 name length + name + 4 x u32 dims + float32 data`.  Saving and
loading round-trips every buffer bit-exactly; a version or digest mismatch
is rejected.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass

import numpy as np

from .config import model_config_text, parse_config_text
from .model import BatchNormState, ModelConfig, ParameterSet
from .tensor import Tensor

MAGIC = b"BALN"
VERSION = 1


class CheckpointError(ValueError):
    """Corrupt file, bad magic, or digest mismatch."""


class CheckpointVersionError(CheckpointError):
    """Format version not supported by this build."""


@dataclass
class Checkpoint:
    iteration: int
    model_cfg: ModelConfig
    params: ParameterSet
    velocity: dict[str, np.ndarray]
    bn_state: BatchNormState


def _write_section(out: list[bytes], arrays: list[tuple[str, np.ndarray]]) -> None:
    out.append(struct.pack("<I", len(arrays)))
    for name, arr in arrays:
        raw = name.encode("utf-8")
        a = np.ascontiguousarray(arr, dtype="<f4")
        dims = a.shape + (1,) * (4 - a.ndim)
        out.append(struct.pack("<I", len(raw)))
        out.append(raw)
        out.append(struct.pack("<4I", *dims))
        out.append(a.tobytes())


class _Reader:
    def __init__(self, raw: bytes):
        self.raw = raw
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise CheckpointError("truncated checkpoint")
        chunk = self.raw[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def section(self) -> list[tuple[str, np.ndarray]]:
        entries = []
        for _ in range(self.u32()):
            name = self.take(self.u32()).decode("utf-8")
            dims = struct.unpack("<4I", self.take(16))
            count = int(np.prod(dims))
            data = np.frombuffer(self.take(4 * count), dtype="<f4").reshape(dims)
            entries.append((name, data.copy()))
        return entries


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    cfg_text = model_config_text(ckpt.model_cfg)
    cfg_bytes = cfg_text.encode("utf-8")
    out: list[bytes] = [
        MAGIC,
        struct.pack("<I", VERSION),
        struct.pack("<I", ckpt.iteration),
        hashlib.sha256(cfg_bytes).digest(),
        struct.pack("<I", len(cfg_bytes)),
        cfg_bytes,
    ]
    _write_section(out, [(name, t.data) for name, t in ckpt.params.items()])
    _write_section(out, sorted(ckpt.velocity.items()))
    stats = []
    for name in sorted(ckpt.bn_state.stats):
        mean, var = ckpt.bn_state.stats[name]
        stats.append((name + ".running_mean", mean))
        stats.append((name + ".running_var", var))
    _write_section(out, stats)
    with open(path, "wb") as fh:
        fh.write(b"".join(out))


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        reader = _Reader(fh.read())
    if reader.take(4) != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version = reader.u32()
    if version != VERSION:
        raise CheckpointVersionError(f"{path}: format version {version}, expected {VERSION}")
    iteration = reader.u32()
    digest = reader.take(32)
    cfg_bytes = reader.take(reader.u32())
    if hashlib.sha256(cfg_bytes).digest() != digest:
        raise CheckpointError(f"{path}: config digest mismatch")
    model_cfg, _ = parse_config_text(cfg_bytes.decode("utf-8"))

    params = ParameterSet()
    for name, arr in reader.section():
        params.add(name, Tensor(arr))
    velocity = {name: arr for name, arr in reader.section()}
    bn_state = BatchNormState()
    for name, arr in reader.section():
        if name.endswith(".running_mean"):
            base = name[: -len(".running_mean")]
            bn_state.stats.setdefault(base, [None, None])[0] = arr.reshape(-1)
        elif name.endswith(".running_var"):
            base = name[: -len(".running_var")]
            bn_state.stats.setdefault(base, [None, None])[1] = arr.reshape(-1)
        else:
            raise CheckpointError(f"unexpected stats entry {name!r}")
    bn_state.stats = {k: (m, v) for k, (m, v) in bn_state.stats.items()}
    return Checkpoint(iteration, model_cfg, params, velocity, bn_state)
