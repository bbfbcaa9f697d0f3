"""Binary checkpoint format.

Layout (little-endian)::

    b"FVREC"  u16 version
    u32 len + UTF-8 JSON header  {model_config, run_config, vocab, epoch}
    u32 n_tensors
    per tensor: u16 len + UTF-8 name, u8 ndim, ndim * u32 shape, float32 values
    32-byte SHA-256 of everything above
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from fairvae.errors import CheckpointError, VocabularyMismatch
from fairvae.training import ModelCheckpoint

MAGIC = b"FVREC"
VERSION = 1


def to_bytes(ckpt: ModelCheckpoint) -> bytes:
    header = json.dumps({"model_config": ckpt.model_config, "run_config": ckpt.run_config,
                         "vocab": ckpt.vocab, "epoch": ckpt.epoch},
                        sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [MAGIC, struct.pack("<H", VERSION), struct.pack("<I", len(header)), header,
             struct.pack("<I", len(ckpt.params))]
    for name in sorted(ckpt.params):
        arr = np.ascontiguousarray(ckpt.params[name], dtype="<f4")
        raw_name = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw_name)) + raw_name)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    body = b"".join(parts)
    return body + hashlib.sha256(body).digest()


def from_bytes(blob: bytes, expected_vocab: str | None = None) -> ModelCheckpoint:
    if len(blob) < 32 + len(MAGIC) or blob[: len(MAGIC)] != MAGIC:
        raise CheckpointError("not a FVREC checkpoint")
    body, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError("checkpoint checksum mismatch (file corrupted)")
    pos = len(MAGIC)
    (version,) = struct.unpack_from("<H", body, pos)
    pos += 2
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (hlen,) = struct.unpack_from("<I", body, pos)
    pos += 4
    header = json.loads(body[pos:pos + hlen].decode("utf-8"))
    pos += hlen
    (count,) = struct.unpack_from("<I", body, pos)
    pos += 4
    params = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", body, pos)
        pos += 2
        name = body[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (ndim,) = struct.unpack_from("<B", body, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", body, pos)
        pos += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(body, dtype="<f4", count=size, offset=pos).reshape(shape)
        pos += 4 * size
        params[name] = arr.astype(np.float64)
    if pos != len(body):
        raise CheckpointError("trailing bytes in checkpoint")
    if expected_vocab is not None and header["vocab"] != expected_vocab:
        raise VocabularyMismatch("checkpoint item vocabulary does not match the dataset")
    return ModelCheckpoint(header["model_config"], params, header["run_config"],
                           header["vocab"], header["epoch"])


def save(path, ckpt: ModelCheckpoint) -> None:
    Path(path).write_bytes(to_bytes(ckpt))


def load(path, expected_vocab: str | None = None) -> ModelCheckpoint:
    return from_bytes(Path(path).read_bytes(), expected_vocab)
