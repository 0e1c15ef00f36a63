#!/usr/bin/env python3
"""
Content hashing, deterministic tensor blobs and atomic file writes.

Hashes are SHA-256 over bytes that do not depend on process state:
tensors are visited in sorted name order and written as little-endian
arrays, so equal parameters always hash equally.

Tensor blob layout (all integers little-endian):
    u32 count
    repeated count times:
        u16 name length, UTF-8 name
        u8  dtype code (see _DTYPES)
        u8  ndim, then ndim x u32 shape
        u64 byte length, raw little-endian data
"""

import json
import os
import struct
import tempfile
from pathlib import Path
from typing import Any, Dict, Mapping, Tuple, Union

import numpy as np
import torch
from Crypto.Hash import SHA256

from .errors import ConfigurationError, IntegrityError

_DTYPES = {
    0: (torch.float32, "<f4"),
    1: (torch.float64, "<f8"),
    2: (torch.int64, "<i8"),
    3: (torch.int32, "<i4"),
    4: (torch.uint8, "|u1"),
    5: (torch.bool, "|b1"),
}
_CODES = {torch_dtype: code for code, (torch_dtype, _) in _DTYPES.items()}


def sha256_hex(data: bytes) -> str:
    """Hex SHA-256 digest of raw bytes."""
    return SHA256.new(data).hexdigest()


def sha256_digest(data: bytes) -> bytes:
    """Raw 32-byte SHA-256 digest."""
    return SHA256.new(data).digest()


def _tensor_bytes(tensor: torch.Tensor) -> Tuple[int, bytes]:
    """Return (dtype code, little-endian bytes) of a CPU copy."""
    tensor = tensor.detach().cpu().contiguous()
    if tensor.dtype not in _CODES:
        raise IntegrityError(f"Unsupported tensor dtype {tensor.dtype}")
    code = _CODES[tensor.dtype]
    array = tensor.numpy().astype(_DTYPES[code][1], copy=False)
    return code, array.tobytes()


def serialize_tensors(tensors: Mapping[str, torch.Tensor]) -> bytes:
    """Pack named tensors into the deterministic blob format."""
    parts = [struct.pack("<I", len(tensors))]
    for name in sorted(tensors):
        tensor = tensors[name]
        code, raw = _tensor_bytes(tensor)
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<H", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<BB", code, tensor.dim()))
        parts.append(struct.pack(f"<{tensor.dim()}I", *tensor.shape))
        parts.append(struct.pack("<Q", len(raw)))
        parts.append(raw)
    return b"".join(parts)


def deserialize_tensors(blob: bytes) -> Dict[str, torch.Tensor]:
    """Inverse of serialize_tensors."""
    offset = 0

    def take(fmt: str) -> tuple:
        nonlocal offset
        values = struct.unpack_from(fmt, blob, offset)
        offset += struct.calcsize(fmt)
        return values

    (count,) = take("<I")
    tensors: Dict[str, torch.Tensor] = {}
    for _ in range(count):
        (name_len,) = take("<H")
        name = blob[offset : offset + name_len].decode("utf-8")
        offset += name_len
        code, ndim = take("<BB")
        shape = take(f"<{ndim}I") if ndim else ()
        (nbytes,) = take("<Q")
        raw = blob[offset : offset + nbytes]
        offset += nbytes
        torch_dtype, np_dtype = _DTYPES[code]
        array = np.frombuffer(raw, dtype=np_dtype).reshape(shape).copy()
        tensors[name] = torch.from_numpy(array).to(torch_dtype)
    if offset != len(blob):
        raise IntegrityError(
            f"Tensor blob has {len(blob) - offset} trailing bytes"
        )
    return tensors


def tensor_hash(tensors: Mapping[str, torch.Tensor]) -> str:
    """Content hash of named tensors (e.g. a state_dict)."""
    return sha256_hex(serialize_tensors(tensors))


def module_hash(module: torch.nn.Module) -> str:
    """Content hash of a module's parameters and buffers."""
    return tensor_hash(module.state_dict())


def atomic_write_bytes(path: Union[str, Path], data: bytes) -> None:
    """Write data to path via a temp file in the same directory."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as handle:
            handle.write(data)
            handle.flush()
            os.fsync(handle.fileno())
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


_ARTIFACT_HEADER = struct.Struct("<8sH")


def pack_artifact(
    magic: bytes,
    version: int,
    meta: Mapping[str, Any],
    tensors: Mapping[str, torch.Tensor],
) -> bytes:
    """
    Self-verifying artifact: header, JSON metadata, tensor blob, hash.

    Layout (little-endian):
        8s  magic
        u16 version
        u32 metadata length, UTF-8 JSON (sorted keys)
        u64 blob length, tensor blob
        32s SHA-256 of everything above
    """
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    blob = serialize_tensors(tensors)
    body = b"".join(
        [
            _ARTIFACT_HEADER.pack(magic, version),
            struct.pack("<I", len(meta_bytes)),
            meta_bytes,
            struct.pack("<Q", len(blob)),
            blob,
        ]
    )
    return body + sha256_digest(body)


def unpack_artifact(
    data: bytes, magic: bytes, version: int
) -> Tuple[Dict[str, Any], Dict[str, torch.Tensor]]:
    """Verify and split an artifact written by pack_artifact."""
    if len(data) < _ARTIFACT_HEADER.size + 32:
        raise IntegrityError("Artifact is truncated")
    body, digest = data[:-32], data[-32:]
    if sha256_digest(body) != digest:
        raise IntegrityError("Artifact content hash does not verify")
    found_magic, found_version = _ARTIFACT_HEADER.unpack_from(body, 0)
    if found_magic != magic:
        raise IntegrityError(
            f"Expected magic {magic!r}, found {found_magic!r}"
        )
    if found_version != version:
        raise ConfigurationError(
            f"Unsupported {magic.decode(errors='replace')} version "
            f"{found_version}"
        )
    offset = _ARTIFACT_HEADER.size
    (meta_len,) = struct.unpack_from("<I", body, offset)
    offset += 4
    meta = json.loads(body[offset : offset + meta_len].decode("utf-8"))
    offset += meta_len
    (blob_len,) = struct.unpack_from("<Q", body, offset)
    offset += 8
    return meta, deserialize_tensors(body[offset : offset + blob_len])
