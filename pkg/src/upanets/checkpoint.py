"""Bit-exact binary checkpoints.

Layout: magic "UPAC", version u32, entry count u32; then per entry a u16
name length, the utf-8 name, a u8 dtype tag (0 = float32), a u8 rank, u32
extents, and the raw little-endian values. Everything is little-endian.
Run metadata (config echo, epoch, best accuracy) lives in a plain-text
sidecar `<file>.meta`, since the binary stream holds arrays only.
"""

import os
import struct

import numpy as np

from .errors import FormatError

MAGIC = b"UPAC"
VERSION = 1
DTYPE_F32 = 0
META_SUFFIX = ".meta"


class Checkpoint:
    """In-memory checkpoint: ordered name->array entries plus metadata."""

    def __init__(self, entries, metadata=None, format_version=VERSION):
        self.format_version = format_version
        self.entries = dict(entries)
        self.metadata = dict(metadata or {})


def save_checkpoint(path, entries, metadata=None):
    """Write (name, array) pairs; arrays must be float32."""
    blob = bytearray()
    blob += MAGIC
    entries = list(entries)
    blob += struct.pack("<II", VERSION, len(entries))
    for name, arr in entries:
        arr = np.ascontiguousarray(arr)
        if arr.dtype != np.float32:
            raise FormatError(f"checkpoint entries must be float32, {name!r} is {arr.dtype}")
        encoded = name.encode("utf-8")
        if len(encoded) > 0xFFFF:
            raise FormatError(f"entry name too long: {name!r}")
        blob += struct.pack("<H", len(encoded)) + encoded
        blob += struct.pack("<BB", DTYPE_F32, arr.ndim)
        blob += struct.pack(f"<{arr.ndim}I", *arr.shape)
        blob += arr.astype("<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(blob)
    if metadata:
        with open(path + META_SUFFIX, "w") as fh:
            for key in sorted(metadata):
                fh.write(f"{key}={metadata[key]}\n")


def _read_meta(path):
    meta_path = path + META_SUFFIX
    if not os.path.exists(meta_path):
        return {}
    meta = {}
    with open(meta_path) as fh:
        for line in fh:
            line = line.rstrip("\n")
            if "=" in line:
                key, value = line.split("=", 1)
                meta[key] = value
    return meta


def load_checkpoint(path):
    """Read a checkpoint file back; any structural damage raises FormatError
    with the offending byte offset."""
    with open(path, "rb") as fh:
        raw = fh.read()

    pos = 0

    def take(n, what):
        nonlocal pos
        if pos + n > len(raw):
            raise FormatError(f"{path}: truncated while reading {what} at byte offset {pos}")
        chunk = raw[pos:pos + n]
        pos += n
        return chunk

    if take(4, "magic") != MAGIC:
        raise FormatError(f"{path}: bad magic at byte offset 0, not a checkpoint file")
    version, count = struct.unpack("<II", take(8, "header"))
    if version != VERSION:
        raise FormatError(f"{path}: unsupported format version {version} at byte offset 4")
    entries = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2, "name length"))
        name = take(name_len, "name").decode("utf-8", errors="strict")
        tag, rank = struct.unpack("<BB", take(2, "entry header"))
        if tag != DTYPE_F32:
            raise FormatError(f"{path}: unknown dtype tag {tag} at byte offset {pos - 2}")
        shape = struct.unpack(f"<{rank}I", take(4 * rank, "extents"))
        n_values = int(np.prod(shape, dtype=np.int64)) if rank else 1
        values = np.frombuffer(take(4 * n_values, f"values of {name!r}"), dtype="<f4")
        entries[name] = values.reshape(shape).astype(np.float32)
    if pos != len(raw):
        raise FormatError(f"{path}: {len(raw) - pos} trailing bytes at byte offset {pos}")
    return Checkpoint(entries, metadata=_read_meta(path))


def save_model(path, model, metadata=None):
    save_checkpoint(path, model.state_entries(), metadata=metadata)


def load_into_model(path, model):
    """Load a checkpoint into an already-built model (strict name/shape match)."""
    ckpt = load_checkpoint(path)
    try:
        model.load_state(ckpt.entries)
    except Exception as exc:
        raise FormatError(f"{path}: checkpoint does not fit the model: {exc}") from exc
    return ckpt
