"""Binary checkpoint format.

Layout (all little-endian)::

    b"PIANETCK"  u32 version
    u32 manifest length, manifest (UTF-8 JSON, sorted keys)
    u32 tensor count
    per tensor: u16 name length, name (UTF-8), u8 ndim, ndim x u32 shape,
                u64 payload bytes, float64 payload

Optimizer velocities are stored as tensors named ``velocity/<param>``. The
manifest repeats every tensor's shape so a load can validate the payload
before anything is handed back. Metadata (epoch, RNG state, loss history,
configs) lives in the manifest.
"""

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CheckpointError, PianetIOError

MAGIC = b"PIANETCK"
VERSION = 1
VELOCITY_PREFIX = "velocity/"


@dataclass
class Checkpoint:
    tensors: dict = field(default_factory=dict)  # parameters and buffers
    velocity: dict = field(default_factory=dict)  # optimizer state per parameter
    meta: dict = field(default_factory=dict)  # JSON-serializable metadata

    @property
    def epoch(self):
        return self.meta.get("epoch", 0)

    @property
    def kind(self):
        return self.meta.get("kind")


def _all_tensors(ckpt):
    items = [(name, ckpt.tensors[name]) for name in sorted(ckpt.tensors)]
    items += [(VELOCITY_PREFIX + name, ckpt.velocity[name]) for name in sorted(ckpt.velocity)]
    return items


def dumps(ckpt):
    tensors = _all_tensors(ckpt)
    manifest = dict(ckpt.meta)
    manifest["tensors"] = [[name, list(np.shape(arr))] for name, arr in tensors]
    text = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [MAGIC, struct.pack("<I", VERSION), struct.pack("<I", len(text)), text, struct.pack("<I", len(tensors))]
    for name, arr in tensors:
        arr = np.ascontiguousarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(struct.pack("<Q", arr.nbytes) + arr.tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, blob, source):
        self.blob, self.pos, self.source = blob, 0, source

    def take(self, n, what):
        if self.pos + n > len(self.blob):
            raise CheckpointError(f"{self.source}: truncated while reading {what} at byte {self.pos} "
                                  f"(need {n} bytes, {len(self.blob) - self.pos} left)")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def loads(blob, source="<checkpoint>"):
    r = _Reader(blob, source)
    if r.take(len(MAGIC), "magic") != MAGIC:
        raise CheckpointError(f"{source}: not a checkpoint (bad magic)")
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise CheckpointError(f"{source}: version {version} is not supported (expected {VERSION})")
    (n_manifest,) = r.unpack("<I", "manifest length")
    try:
        manifest = json.loads(r.take(n_manifest, "manifest").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{source}: manifest is not valid JSON ({exc})") from None
    declared = manifest.pop("tensors", None)
    if not isinstance(declared, list):
        raise CheckpointError(f"{source}: manifest has no tensor list")
    (count,) = r.unpack("<I", "tensor count")
    if count != len(declared):
        raise CheckpointError(f"{source}: {count} tensors in payload but {len(declared)} declared")
    tensors, velocity = {}, {}
    for (want_name, want_shape) in declared:
        (n_name,) = r.unpack("<H", "tensor name length")
        name = r.take(n_name, "tensor name").decode("utf-8", errors="replace")
        if name != want_name:
            raise CheckpointError(f"{source}: tensor {name!r} found where {want_name!r} was declared")
        (ndim,) = r.unpack("<B", f"{name} rank")
        shape = list(r.unpack(f"<{ndim}I", f"{name} shape"))
        if shape != list(want_shape):
            raise CheckpointError(f"{source}: tensor {name} has shape {shape}, manifest declares {want_shape}")
        (nbytes,) = r.unpack("<Q", f"{name} length")
        expected = int(np.prod(shape)) * 8
        if nbytes != expected:
            raise CheckpointError(f"{source}: tensor {name} payload is {nbytes} bytes, shape needs {expected}")
        arr = np.frombuffer(r.take(nbytes, f"{name} payload"), dtype="<f8").reshape(shape).astype(np.float64)
        if name.startswith(VELOCITY_PREFIX):
            velocity[name[len(VELOCITY_PREFIX):]] = arr
        else:
            tensors[name] = arr
    if r.pos != len(blob):
        raise CheckpointError(f"{source}: {len(blob) - r.pos} trailing bytes after the last tensor")
    return Checkpoint(tensors, velocity, manifest)


def save_checkpoint(path, ckpt):
    try:
        Path(path).write_bytes(dumps(ckpt))
    except OSError as exc:
        raise PianetIOError(f"cannot write checkpoint {path}: {exc.strerror or exc}") from exc
    return Path(path)


def load_checkpoint(path):
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise PianetIOError(f"cannot read checkpoint {path}: {exc.strerror or exc}") from exc
    return loads(blob, str(path))
