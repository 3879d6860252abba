"""Binary checkpoint serialization.

Layout: magic "SPCKPT1", format version, a digest of the model
configuration, a manifest of (name, dtype, shape) entries, the raw
little-endian payload in manifest order, and a 64-bit checksum of the
payload. Round-trips are byte-identical; the digest forces an explicit,
matching config file at load time.
"""

from __future__ import annotations

import hashlib
import struct

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import canonical_model_string
from .model import ModelConfig

MAGIC = b"SPCKPT1"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


class CheckpointError(RuntimeError):
    pass


class TruncatedError(CheckpointError):
    pass


class ChecksumError(CheckpointError):
    pass


class DigestError(CheckpointError):
    pass


def config_digest(config: ModelConfig) -> bytes:
    return hashlib.sha256(canonical_model_string(config).encode("utf-8")).digest()


def _payload_checksum(payload: bytes) -> bytes:
    return hashlib.blake2b(payload, digest_size=8).digest()


def save(params: dict[str, Tensor], config: ModelConfig, path: str):
    names = sorted(params)
    manifest = bytearray()
    manifest += struct.pack("<I", len(names))
    payload = bytearray()
    for name in names:
        arr = params[name].data
        code = _DTYPE_CODES.get(arr.dtype)
        if code is None:
            raise CheckpointError(f"unsupported dtype {arr.dtype} for {name}")
        encoded = name.encode("utf-8")
        manifest += struct.pack("<H", len(encoded)) + encoded
        manifest += struct.pack("<BB", code, arr.ndim)
        manifest += struct.pack(f"<{arr.ndim}I", *arr.shape)
        payload += np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()
    blob = MAGIC + struct.pack("<I", VERSION) + config_digest(config) \
        + bytes(manifest) + bytes(payload) + _payload_checksum(bytes(payload))
    with open(path, "wb") as fh:
        fh.write(blob)


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.off = 0

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.blob):
            raise TruncatedError(f"checkpoint truncated at byte {self.off}")
        out = self.blob[self.off:self.off + n]
        self.off += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load(path: str, config: ModelConfig) -> dict[str, np.ndarray]:
    """Arrays by name; the caller binds them onto an initialized model."""
    with open(path, "rb") as fh:
        blob = fh.read()
    r = _Reader(blob)
    if r.take(len(MAGIC)) != MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a checkpoint")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    digest = r.take(32)
    if digest != config_digest(config):
        raise DigestError(f"{path}: checkpoint was written under a different "
                          f"model configuration")
    (count,) = r.unpack("<I")
    entries = []
    for _ in range(count):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode("utf-8")
        code, ndim = r.unpack("<BB")
        shape = r.unpack(f"<{ndim}I")
        if code not in _DTYPES:
            raise CheckpointError(f"{path}: unknown dtype code {code}")
        entries.append((name, _DTYPES[code], shape))
    payload_len = sum(int(np.prod(shape, dtype=np.int64)) * dt.itemsize
                      for _, dt, shape in entries)
    payload = r.take(payload_len)
    footer = r.take(8)
    if r.off != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - r.off} trailing bytes")
    if _payload_checksum(payload) != footer:
        raise ChecksumError(f"{path}: payload checksum mismatch")
    out = {}
    off = 0
    for name, dt, shape in entries:
        size = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        arr = np.frombuffer(payload[off:off + size], dtype=dt).reshape(shape)
        out[name] = np.ascontiguousarray(arr)
        off += size
    return out


def load_into(params: dict[str, Tensor], path: str, config: ModelConfig):
    """Replace parameter arrays in place from a checkpoint."""
    arrays = load(path, config)
    missing = set(params) - set(arrays)
    extra = set(arrays) - set(params)
    if missing or extra:
        raise CheckpointError(f"{path}: parameter set mismatch "
                              f"(missing {sorted(missing)[:3]}, extra {sorted(extra)[:3]})")
    for name, arr in arrays.items():
        if params[name].data.shape != arr.shape:
            raise CheckpointError(f"{path}: shape mismatch for {name}: "
                                  f"{arr.shape} vs {params[name].data.shape}")
        params[name].data = arr.astype(params[name].data.dtype, copy=False)
