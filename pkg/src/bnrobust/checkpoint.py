"""Checkpoint file format.

Layout (all integers little-endian)::

    offset 0   8 bytes   magic b"BNRCKPT\\0"
    offset 8   uint32    format version (1)
    offset 12  uint64    manifest length L in bytes
    offset 20  L bytes   manifest, UTF-8 JSON with sorted keys
    offset 20+L          payload: float32 little-endian arrays, back to back

The manifest holds ``arch`` (the ResNet config), ``provenance`` (free-form
training metadata) and ``arrays``: one record per stored array in the
model's namespace order, ``{"name", "kind", "shape", "offset", "nbytes"}``
with offsets relative to the payload start. Running statistics are stored
alongside parameters (``kind`` = ``"buffer"``).
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .nn import PreActResNet, ResNetConfig, build_resnet

MAGIC = b"BNRCKPT\0"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<8sIQ")


class CheckpointError(RuntimeError):
    pass


class ArchitectureMismatch(CheckpointError):
    pass


@dataclass
class Checkpoint:
    arch: dict
    provenance: dict
    state: dict  # name -> float32 array, namespace order
    sha256: str = ""

    def build_model(self) -> PreActResNet:
        model = build_resnet(ResNetConfig(**self.arch))
        try:
            model.load_state_dict(self.state)
        except (KeyError, ValueError) as exc:
            raise ArchitectureMismatch(str(exc)) from exc
        model.eval()
        return model


def serialize(model: PreActResNet, provenance: dict | None = None) -> bytes:
    params = {name for name, _ in model.named_parameters()}
    records, blobs, offset = [], [], 0
    for name, t in model.named_arrays():
        raw = np.ascontiguousarray(t.data, dtype="<f4").tobytes()
        records.append(
            {
                "name": name,
                "kind": "param" if name in params else "buffer",
                "shape": list(t.shape),
                "offset": offset,
                "nbytes": len(raw),
            }
        )
        blobs.append(raw)
        offset += len(raw)
    manifest = {
        "format_version": FORMAT_VERSION,
        "arch": model.cfg.to_dict(),
        "provenance": provenance or {},
        "arrays": records,
    }
    head = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return _HEADER.pack(MAGIC, FORMAT_VERSION, len(head)) + head + b"".join(blobs)


def save_checkpoint(path, model: PreActResNet, provenance: dict | None = None) -> str:
    """Write ``model`` to ``path`` atomically; returns the file's sha256."""
    path = Path(path)
    data = serialize(model, provenance)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)
    return hashlib.sha256(data).hexdigest()


def deserialize(data: bytes, source: str = "<bytes>") -> Checkpoint:
    if len(data) < _HEADER.size:
        raise CheckpointError(f"{source}: too short to be a checkpoint")
    magic, version, mlen = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise CheckpointError(f"{source}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{source}: unsupported format version {version}")
    start = _HEADER.size
    try:
        manifest = json.loads(data[start : start + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{source}: unreadable manifest ({exc})") from exc
    payload = memoryview(data)[start + mlen :]
    state, expected = {}, 0
    for rec in manifest["arrays"]:
        if rec["offset"] != expected:
            raise CheckpointError(f"{source}: array {rec['name']} at offset {rec['offset']}, expected {expected}")
        count = int(np.prod(rec["shape"])) if rec["shape"] else 1
        if rec["nbytes"] != 4 * count:
            raise CheckpointError(f"{source}: array {rec['name']} size does not match its shape")
        end = rec["offset"] + rec["nbytes"]
        if end > len(payload):
            raise CheckpointError(f"{source}: payload truncated inside {rec['name']}")
        arr = np.frombuffer(payload[rec["offset"] : end], dtype="<f4").astype(np.float32)
        state[rec["name"]] = arr.reshape(rec["shape"])
        expected = end
    if expected != len(payload):
        raise CheckpointError(f"{source}: {len(payload) - expected} trailing payload bytes")
    return Checkpoint(manifest["arch"], manifest.get("provenance", {}), state, hashlib.sha256(data).hexdigest())


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    return deserialize(path.read_bytes(), str(path))


def load_model(path, expected_arch: dict | None = None) -> tuple[PreActResNet, Checkpoint]:
    ckpt = load_checkpoint(path)
    if expected_arch is not None:
        keys = ("depth_n", "widths", "num_classes", "in_channels")
        got = {k: ckpt.arch.get(k) for k in keys}
        want = {k: expected_arch.get(k) for k in keys}
        if got != want:
            raise ArchitectureMismatch(f"checkpoint architecture {got} != requested {want}")
    return ckpt.build_model(), ckpt
