"""Bit-exact weight container and JSON config sidecar.

Layout (all integers little-endian)::

    bytes 0-3    magic b"VIRW"
    bytes 4-7    version, u32 (= 1)
    bytes 8-15   manifest length in bytes, u64
    manifest     UTF-8 JSON array of {name, dtype, shape, offset, byte_len}
    payload      raw little-endian tensor bytes; offsets are relative to the
                 payload start, ascending and non-overlapping
"""

from __future__ import annotations

import json
import math
import struct
from pathlib import Path

import numpy as np

from vir.encoder import EncoderConfig, WeightStore
from vir.errors import (
    BadMagicError,
    ManifestError,
    PayloadLengthError,
    UnknownDtypeError,
    VersionMismatchError,
)

MAGIC = b"VIRW"
VERSION = 1
DTYPES = {"f64": np.dtype("<f8"), "f32": np.dtype("<f4")}
_HEADER = struct.Struct("<4sIQ")


def _dtype_tag(array: np.ndarray) -> str:
    for tag, dtype in DTYPES.items():
        if array.dtype == dtype.newbyteorder("="):
            return tag
    raise UnknownDtypeError(f"cannot store arrays of dtype {array.dtype}")


def save_weights(store, path) -> None:
    manifest, chunks, offset = [], [], 0
    for name, array in store.items():
        tag = _dtype_tag(array)
        data = np.ascontiguousarray(array, dtype=DTYPES[tag]).tobytes()
        manifest.append({"name": name, "dtype": tag, "shape": list(array.shape),
                         "offset": offset, "byte_len": len(data)})
        chunks.append(data)
        offset += len(data)
    header_json = json.dumps(manifest).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, len(header_json)))
        fh.write(header_json)
        for data in chunks:
            fh.write(data)


def _parse_manifest(raw: bytes) -> list[dict]:
    try:
        manifest = json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ManifestError(f"manifest is not valid UTF-8 JSON: {exc}") from exc
    if not isinstance(manifest, list):
        raise ManifestError("manifest must be a JSON array")
    keys = {"name", "dtype", "shape", "offset", "byte_len"}
    for entry in manifest:
        if not isinstance(entry, dict) or set(entry) != keys:
            raise ManifestError(f"manifest entry {entry!r} must have exactly {sorted(keys)}")
    return manifest


def load_weights(path) -> WeightStore:
    blob = Path(path).read_bytes()
    if len(blob) < _HEADER.size or blob[:4] != MAGIC:
        raise BadMagicError(f"{path} is not a VIRW weight container")
    _, version, manifest_len = _HEADER.unpack_from(blob)
    if version != VERSION:
        raise VersionMismatchError(f"container version {version}, expected {VERSION}")
    start = _HEADER.size + manifest_len
    if start > len(blob):
        raise PayloadLengthError(f"manifest length {manifest_len} runs past end of file")
    manifest = _parse_manifest(blob[_HEADER.size:start])
    payload = memoryview(blob)[start:]

    store = WeightStore()
    end = 0
    for entry in manifest:
        name, tag = entry["name"], entry["dtype"]
        if tag not in DTYPES:
            raise UnknownDtypeError(f"{name!r} has unknown dtype {tag!r}")
        dtype = DTYPES[tag]
        shape = tuple(entry["shape"])
        offset, byte_len = entry["offset"], entry["byte_len"]
        if offset < end:
            raise ManifestError(f"{name!r} at offset {offset} overlaps the previous "
                                f"tensor ending at {end}")
        if byte_len != math.prod(shape) * dtype.itemsize:
            raise ManifestError(f"{name!r}: byte_len {byte_len} does not match shape {shape}")
        if name in store:
            raise ManifestError(f"duplicate tensor name {name!r}")
        if offset + byte_len > len(payload):
            raise PayloadLengthError(f"{name!r} needs payload bytes up to {offset + byte_len}, "
                                     f"payload has {len(payload)}")
        store[name] = np.frombuffer(payload[offset:offset + byte_len], dtype=dtype) \
            .reshape(shape).astype(dtype.newbyteorder("="))
        end = offset + byte_len
    if end != len(payload):
        raise PayloadLengthError(f"manifest covers {end} payload bytes, file holds {len(payload)}")
    return store


def save_config(config: EncoderConfig, path) -> None:
    Path(path).write_text(json.dumps(config.to_dict(), indent=2))


def load_config(path) -> EncoderConfig:
    return EncoderConfig.from_dict(json.loads(Path(path).read_text()))
