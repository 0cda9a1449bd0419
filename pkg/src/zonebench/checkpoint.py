"""Versioned checkpoint container.

Layout (all integers little-endian)::

    8 bytes   magic  b"ZBCKPT\\x00\\x01"
    4 bytes   format version (uint32)
    8 bytes   header length N (uint64)
    N bytes   UTF-8 JSON header: config echo, metadata, tensor table
    ...       raw tensor bytes, concatenated in table order

Each tensor-table row is ``{"name", "dtype", "shape", "offset", "nbytes"}``
with ``dtype`` a numpy little-endian code (``<f4``, ``<i8``) and ``offset``
relative to the start of the payload. The header also stores the CRC-32 of
the payload so truncation and bit rot are both detected on load.
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np
import torch

from .errors import CheckpointFormatError
from .models import ModelConfig, ModelHandle, build

MAGIC = b"ZBCKPT\x00\x01"
VERSION = 1
_PREAMBLE = struct.Struct("<8sIQ")


def save_checkpoint(model: ModelHandle, path, meta: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = model.state_arrays()
    table, chunks, offset = [], [], 0
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = arr.tobytes()
        table.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    header = {
        "format": "zonebench-checkpoint",
        "version": VERSION,
        "config": model.config.to_dict(),
        "meta": meta or {},
        "payload_bytes": len(payload),
        "payload_crc32": zlib.crc32(payload),
        "tensors": table,
    }
    blob = json.dumps(header, sort_keys=True).encode()
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_PREAMBLE.pack(MAGIC, VERSION, len(blob)))
        fh.write(blob)
        fh.write(payload)
    tmp.replace(path)
    return path


def read_header(path) -> tuple[dict, bytes]:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise CheckpointFormatError(f"{path}: cannot read checkpoint ({exc})") from None
    if len(data) < _PREAMBLE.size:
        raise CheckpointFormatError(f"{path}: truncated checkpoint preamble")
    magic, version, hlen = _PREAMBLE.unpack_from(data)
    if magic != MAGIC:
        raise CheckpointFormatError(f"{path}: not a zonebench checkpoint (bad magic)")
    if version != VERSION:
        raise CheckpointFormatError(f"{path}: checkpoint version {version}, expected {VERSION}")
    start = _PREAMBLE.size + hlen
    if len(data) < start:
        raise CheckpointFormatError(f"{path}: truncated header")
    try:
        header = json.loads(data[_PREAMBLE.size : start])
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"{path}: corrupted header ({exc})") from None
    payload = data[start:]
    if len(payload) != header.get("payload_bytes"):
        raise CheckpointFormatError(f"{path}: payload is {len(payload)} bytes, header says {header.get('payload_bytes')}")
    if zlib.crc32(payload) != header.get("payload_crc32"):
        raise CheckpointFormatError(f"{path}: payload checksum mismatch")
    return header, payload


def load_checkpoint(path) -> ModelHandle:
    header, payload = read_header(path)
    try:
        config = ModelConfig.from_dict(header["config"])
    except Exception as exc:  # noqa: BLE001
        raise CheckpointFormatError(f"{path}: invalid config echo ({exc})") from None
    model = build(config)
    state = {}
    for row in header["tensors"]:
        raw = payload[row["offset"] : row["offset"] + row["nbytes"]]
        arr = np.frombuffer(raw, dtype=np.dtype(row["dtype"])).reshape(row["shape"])
        state[row["name"]] = torch.from_numpy(arr.astype(arr.dtype.newbyteorder("="), copy=True))
    try:
        model.net.load_state_dict(state, strict=True)
    except RuntimeError as exc:
        raise CheckpointFormatError(f"{path}: tensors do not match architecture {config.architecture.value}: {exc}") from None
    model.net.eval()
    model.meta = header.get("meta", {})
    return model
