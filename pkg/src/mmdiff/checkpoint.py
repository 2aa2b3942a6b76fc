"""Checkpoint persistence with a fixed, verifiable binary layout.

File layout, all integers little-endian:

    magic "MVDR" | u32 version | u32 config_len | config JSON (sorted keys)
    | u32 tensor_count | directory | payload

Each directory entry holds the tensor name, shape, CRC32 of its payload
bytes, and offset/length into the payload region; payload tensors are raw
float32 little-endian in sorted-name order. Saving is fully deterministic,
so save -> load -> save reproduces the file byte for byte.

Loads verify magic, version, and every CRC; corruption and truncation
surface as CheckpointIntegrityError rather than silently wrong weights.
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np
import torch

MAGIC = b"MVDR"
VERSION = 1


class CheckpointError(Exception):
    """Base class for checkpoint load failures."""


class CheckpointFormatError(CheckpointError):
    """Not a checkpoint file (bad magic or malformed structure)."""


class CheckpointVersionError(CheckpointError):
    def __init__(self, found: int, expected: int):
        super().__init__(f"checkpoint version {found} not supported (expected {expected})")
        self.found = found
        self.expected = expected


class CheckpointIntegrityError(CheckpointError):
    """Payload truncated or checksum mismatch."""


def save_checkpoint(config: dict, tensors: dict[str, torch.Tensor], path) -> None:
    """Write config + named float32 tensors; atomic (temp file + rename)."""
    names = sorted(tensors)
    config_blob = json.dumps(config, sort_keys=True, separators=(",", ":")).encode()

    payload = bytearray()
    directory = bytearray()
    for name in names:
        t = tensors[name].detach()
        if t.dtype != torch.float32:
            raise ValueError(f"tensor {name!r} must be float32, got {t.dtype}")
        raw = np.ascontiguousarray(t.numpy(), dtype="<f4").tobytes()
        name_b = name.encode()
        directory += struct.pack("<H", len(name_b)) + name_b
        directory += struct.pack("<B", t.dim())
        directory += struct.pack(f"<{t.dim()}I", *t.shape)
        directory += struct.pack("<IQQ", zlib.crc32(raw), len(payload), len(raw))
        payload += raw

    blob = (
        MAGIC
        + struct.pack("<I", VERSION)
        + struct.pack("<I", len(config_blob))
        + config_blob
        + struct.pack("<I", len(names))
        + bytes(directory)
        + bytes(payload)
    )
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(blob)
    tmp.replace(path)


def load_checkpoint(path) -> tuple[dict, dict[str, torch.Tensor]]:
    """Read and verify a checkpoint; returns (config, tensors)."""
    blob = Path(path).read_bytes()
    view = memoryview(blob)
    pos = 0

    def take(n: int, what: str) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointIntegrityError(f"truncated file while reading {what}")
        chunk = view[pos: pos + n]
        pos += n
        return chunk

    if bytes(take(4, "magic")) != MAGIC:
        raise CheckpointFormatError(f"bad magic bytes in {path}")
    (version,) = struct.unpack("<I", take(4, "version"))
    if version != VERSION:
        raise CheckpointVersionError(version, VERSION)
    (config_len,) = struct.unpack("<I", take(4, "config length"))
    try:
        config = json.loads(bytes(take(config_len, "config")).decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointFormatError(f"malformed config block: {e}") from e
    (count,) = struct.unpack("<I", take(4, "tensor count"))

    entries = []
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2, "name length"))
        name = bytes(take(name_len, "name")).decode()
        (ndim,) = struct.unpack("<B", take(1, "rank"))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim, "shape"))
        crc, offset, nbytes = struct.unpack("<IQQ", take(20, "directory entry"))
        entries.append((name, shape, crc, offset, nbytes))

    payload = view[pos:]
    tensors = {}
    for name, shape, crc, offset, nbytes in entries:
        if offset + nbytes > len(payload):
            raise CheckpointIntegrityError(f"tensor {name!r} extends past end of file")
        raw = bytes(payload[offset: offset + nbytes])
        if zlib.crc32(raw) != crc:
            raise CheckpointIntegrityError(f"checksum mismatch on tensor {name!r}")
        arr = np.frombuffer(raw, dtype="<f4").reshape(shape)
        tensors[name] = torch.from_numpy(arr.copy())
    return config, tensors
