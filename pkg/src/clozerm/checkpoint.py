"""Versioned binary checkpoint format (TRM1).

Layout, all integers little-endian:

    magic  "TRM1"                       4 bytes
    format version                      u32
    manifest length in bytes            u32
    manifest text, one line per tensor  "name dim0xdim1x... offset\\n"
    payload length in bytes             u64
    payload: raw little-endian float32 tensor data at the listed offsets
    config length in bytes              u32
    config JSON: {"model": {...}, "extra": {...}}

Readers reject unknown versions. Adapter tensors travel under names
prefixed "adapter." next to the base weights, with their rank and targets
recorded in the config block.
"""

import dataclasses
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import CheckpointError
from .fileio import atomic_write_bytes
from .model import ModelConfig

MAGIC = b"TRM1"
VERSION = 1


@dataclass
class Checkpoint:
    config: ModelConfig
    tensors: dict
    extra: dict = field(default_factory=dict)


def _validate_name(name: str) -> None:
    if not name or any(c.isspace() for c in name):
        raise CheckpointError(f"invalid tensor name {name!r}")


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    manifest_lines = []
    payload_parts = []
    offset = 0
    for name, arr in ckpt.tensors.items():
        _validate_name(name)
        arr = np.asarray(arr, dtype=np.float32)
        dims = "x".join(str(d) for d in arr.shape)
        manifest_lines.append(f"{name} {dims} {offset}\n")
        raw = arr.astype("<f4", copy=False).tobytes(order="C")
        payload_parts.append(raw)
        offset += len(raw)
    manifest = "".join(manifest_lines).encode("utf-8")
    payload = b"".join(payload_parts)
    config_block = json.dumps(
        {"model": dataclasses.asdict(ckpt.config), "extra": ckpt.extra},
        sort_keys=True,
        ensure_ascii=False,
    ).encode("utf-8")

    blob = bytearray()
    blob += MAGIC
    blob += VERSION.to_bytes(4, "little")
    blob += len(manifest).to_bytes(4, "little")
    blob += manifest
    blob += len(payload).to_bytes(8, "little")
    blob += payload
    blob += len(config_block).to_bytes(4, "little")
    blob += config_block
    atomic_write_bytes(path, bytes(blob))


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise CheckpointError("checkpoint file is truncated")
        chunk = self.blob[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def u32(self) -> int:
        return int.from_bytes(self.take(4), "little")

    def u64(self) -> int:
        return int.from_bytes(self.take(8), "little")


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        blob = fh.read()
    r = _Reader(blob)
    if r.take(4) != MAGIC:
        raise CheckpointError(f"{path}: not a TRM1 checkpoint (bad magic)")
    version = r.u32()
    if version != VERSION:
        raise CheckpointError(f"{path}: unknown checkpoint format version {version}")
    manifest = r.take(r.u32()).decode("utf-8")
    payload = r.take(r.u64())

    entries = []
    for line_no, line in enumerate(manifest.splitlines(), start=1):
        parts = line.split(" ")
        if len(parts) != 3:
            raise CheckpointError(f"{path}: malformed manifest line {line_no}")
        name, dims, offset = parts
        shape = tuple(int(d) for d in dims.split("x")) if dims else ()
        entries.append((name, shape, int(offset)))

    tensors = {}
    for name, shape, offset in entries:
        count = int(np.prod(shape)) if shape else 1
        end = offset + 4 * count
        if offset < 0 or end > len(payload):
            raise CheckpointError(f"{path}: tensor {name} lies outside the payload")
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=offset)
        tensors[name] = arr.astype(np.float32, copy=True).reshape(shape)

    try:
        cfg = json.loads(r.take(r.u32()).decode("utf-8"))
        config = ModelConfig(**cfg["model"])
        extra = cfg.get("extra", {})
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"{path}: malformed config block: {exc}") from exc
    return Checkpoint(config=config, tensors=tensors, extra=extra)
