"""Binary checkpoint files.

Layout (all integers little-endian)::

    b"L2S1" | u32 version | u64 header length | header (UTF-8 JSON)
    | body: float32 arrays back to back, in header order
    | u64 checksum (first 8 bytes of blake2b over the body)

The header holds the config echo, stage, step and, per array, its name,
shape and byte offset into the body. Writing is canonical, so a load/save
round trip reproduces the file byte for byte.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import CheckpointError

MAGIC = b"L2S1"
VERSION = 1


@dataclass
class Checkpoint:
    config: dict
    stage: int
    step: int
    arrays: dict[str, np.ndarray]


def checksum(body: bytes) -> int:
    return int.from_bytes(hashlib.blake2b(body, digest_size=8).digest(), "little")


def encode(ckpt: Checkpoint) -> bytes:
    names = sorted(ckpt.arrays)
    entries, chunks, offset = [], [], 0
    for name in names:
        arr = np.ascontiguousarray(ckpt.arrays[name], dtype="<f4")
        raw = arr.tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps({"config": ckpt.config, "stage": int(ckpt.stage), "step": int(ckpt.step),
                         "arrays": entries}, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = b"".join(chunks)
    return b"".join([MAGIC, struct.pack("<IQ", VERSION, len(header)), header, body,
                     struct.pack("<Q", checksum(body))])


def decode(raw: bytes) -> Checkpoint:
    if len(raw) < 24 or raw[:4] != MAGIC:
        raise CheckpointError("not an L2S1 checkpoint")
    version, hlen = struct.unpack("<IQ", raw[4:16])
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    try:
        header = json.loads(raw[16:16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from exc
    body = raw[16 + hlen:-8]
    (stored,) = struct.unpack("<Q", raw[-8:])
    if checksum(body) != stored:
        raise CheckpointError("checkpoint checksum mismatch")
    arrays = {}
    for e in header["arrays"]:
        chunk = body[e["offset"]:e["offset"] + e["nbytes"]]
        if len(chunk) != e["nbytes"]:
            raise CheckpointError(f"array {e['name']} is truncated")
        arrays[e["name"]] = np.frombuffer(chunk, dtype="<f4").reshape(e["shape"]).astype(np.float32)
    return Checkpoint(header["config"], header["stage"], header["step"], arrays)


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> None:
    """Atomic write: the file appears complete or not at all."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(encode(ckpt))
    os.replace(tmp, path)


def load_checkpoint(path: str | Path, expected_config: dict | None = None,
                    force: bool = False) -> Checkpoint:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    ckpt = decode(raw)
    if expected_config is not None and ckpt.config != expected_config and not force:
        diff = sorted(k for k in set(ckpt.config) | set(expected_config)
                      if ckpt.config.get(k) != expected_config.get(k))
        raise CheckpointError(f"checkpoint {path} was written with a different config "
                              f"(differs in {diff}); pass --force to load anyway")
    return ckpt
