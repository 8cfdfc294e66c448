"""VNCKPT1 checkpoint container.

Layout (all little-endian):
    magic     8 bytes   b"VNCKPT1\\0"
    u64       manifest byte length
    manifest  UTF-8 JSON: {"kind", "config", "extra",
                           "tensors": [{"name", "shape", "offset", "nbytes"}]}
    payload   raw binary32 tensor blobs, row-major, at the listed offsets

Offsets are relative to the start of the payload section. Round-trips
are bit-exact and endianness is pinned, so files transfer across
platforms. Parameter digests (sha256 over names + blob bytes) are used
both for provenance echoes and the fine-tuning freeze audit.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from typing import Iterable

import numpy as np
import torch
from torch import nn

from .errors import (
    CheckpointBadMagic,
    CheckpointError,
    CheckpointTensorMismatch,
    CheckpointTruncated,
)

MAGIC = b"VNCKPT1\0"
_LEN = struct.Struct("<Q")


def _named_tensors(module: nn.Module) -> list[tuple[str, torch.Tensor]]:
    # state_dict covers parameters and buffers in deterministic order
    return [(name, t) for name, t in module.state_dict().items()]


def parameter_digest(module: nn.Module) -> str:
    """sha256 over tensor names and little-endian float32 bytes."""
    h = hashlib.sha256()
    for name, t in _named_tensors(module):
        h.update(name.encode())
        h.update(_blob(t))
    return h.hexdigest()


def _blob(t: torch.Tensor) -> bytes:
    arr = t.detach().cpu().numpy().astype("<f4", copy=False)
    return np.ascontiguousarray(arr).tobytes()


def write_checkpoint(
    path,
    kind: str,
    config: dict,
    tensors: Iterable[tuple[str, torch.Tensor]],
    extra: dict | None = None,
) -> None:
    """Serialize named tensors atomically (write temp file, then rename)."""
    entries = []
    blobs = []
    offset = 0
    for name, t in tensors:
        blob = _blob(t)
        entries.append(
            {"name": name, "shape": list(t.shape), "offset": offset, "nbytes": len(blob)}
        )
        blobs.append(blob)
        offset += len(blob)
    manifest = json.dumps(
        {"kind": kind, "config": config, "extra": extra or {}, "tensors": entries}
    ).encode()
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(_LEN.pack(len(manifest)))
        fh.write(manifest)
        for blob in blobs:
            fh.write(blob)
    os.replace(tmp, path)


def read_checkpoint(path) -> tuple[str, dict, dict, dict[str, np.ndarray]]:
    """Parse a container into (kind, config, extra, name -> float32 array)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[: len(MAGIC)] != MAGIC:
        raise CheckpointBadMagic(f"{path}: bad magic bytes")
    off = len(MAGIC)
    if len(blob) < off + _LEN.size:
        raise CheckpointTruncated(f"{path}: missing manifest length")
    (mlen,) = _LEN.unpack_from(blob, off)
    off += _LEN.size
    if len(blob) < off + mlen:
        raise CheckpointTruncated(f"{path}: manifest truncated")
    try:
        manifest = json.loads(blob[off : off + mlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: malformed manifest: {exc}") from exc
    payload_start = off + mlen
    tensors: dict[str, np.ndarray] = {}
    for entry in manifest.get("tensors", []):
        start = payload_start + entry["offset"]
        end = start + entry["nbytes"]
        if end > len(blob):
            raise CheckpointTruncated(f"{path}: tensor {entry['name']!r} truncated")
        flat = np.frombuffer(blob, dtype="<f4", count=entry["nbytes"] // 4, offset=start)
        tensors[entry["name"]] = flat.reshape(entry["shape"]).astype(np.float32)
    return (
        manifest.get("kind", ""),
        manifest.get("config", {}),
        manifest.get("extra", {}),
        tensors,
    )


def save_module(path, module: nn.Module, kind: str, config: dict, extra: dict | None = None) -> None:
    write_checkpoint(path, kind, config, _named_tensors(module), extra)


def load_into_module(module: nn.Module, tensors: dict[str, np.ndarray], prefix: str = "") -> None:
    """Copy arrays into an existing module; names and shapes must match."""
    state = module.state_dict()
    want = {prefix + name: t for name, t in state.items()}
    have = {n: a for n, a in tensors.items() if n.startswith(prefix)}
    missing = sorted(set(want) - set(have))
    unexpected = sorted(set(have) - set(want))
    if missing or unexpected:
        raise CheckpointTensorMismatch(
            f"tensor names do not match module (missing={missing[:5]}, unexpected={unexpected[:5]})"
        )
    with torch.no_grad():
        for name, t in state.items():
            arr = have[prefix + name]
            if tuple(arr.shape) != tuple(t.shape):
                raise CheckpointTensorMismatch(
                    f"tensor {name!r}: file shape {arr.shape} != module shape {tuple(t.shape)}"
                )
            t.copy_(torch.from_numpy(arr.copy()))


def blob_digest(path) -> str:
    """Git-style content digest of a file (sha1 over 'blob <len>\\0' + bytes)."""
    with open(path, "rb") as fh:
        data = fh.read()
    h = hashlib.sha1()
    h.update(f"blob {len(data)}\0".encode())
    h.update(data)
    return h.hexdigest()
