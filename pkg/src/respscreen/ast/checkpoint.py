"""Versioned checkpoint container.

Layout: 8-byte magic, little-endian u32 format version, u64 header length,
UTF-8 JSON header (config, LoRA spec, frozen names, tensor directory with
dtype/shape/offset/nbytes), then the raw little-endian tensor payloads.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from ..errors import CheckpointError
from .model import AstConfig, AstModel, LoraSpec

MAGIC = b"RSASTCK\x00"
VERSION = 1
_PREFIX = struct.Struct("<8sIQ")


def save_checkpoint(model: AstModel, path: str | Path, extra: dict | None = None) -> None:
    directory, blobs, offset = [], [], 0
    for name, value in model.params.items():
        arr = np.ascontiguousarray(value, dtype=value.dtype.newbyteorder("<"))
        raw = arr.tobytes()
        directory.append({
            "name": name,
            "dtype": arr.dtype.str,
            "shape": list(arr.shape),
            "offset": offset,
            "nbytes": len(raw),
        })
        blobs.append(raw)
        offset += len(raw)
    header = {
        "version": VERSION,
        "config": model.config.to_dict(),
        "lora": model.lora.to_dict() if model.lora else None,
        "frozen": sorted(model.frozen),
        "tensors": directory,
        "extra": extra or {},
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, VERSION, len(hbytes)))
        fh.write(hbytes)
        for raw in blobs:
            fh.write(raw)


def read_header(path: str | Path) -> dict:
    return _parse(Path(path).read_bytes())[0]


def _parse(data: bytes) -> tuple[dict, int]:
    if len(data) < _PREFIX.size:
        raise CheckpointError("file too short for checkpoint prefix")
    magic, version, hlen = _PREFIX.unpack_from(data, 0)
    if magic != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
    start = _PREFIX.size + hlen
    if len(data) < start:
        raise CheckpointError("truncated checkpoint header")
    try:
        header = json.loads(data[_PREFIX.size : start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from exc
    if header.get("version") != version:
        raise CheckpointError("header version disagrees with prefix")
    return header, start


def load_checkpoint(path: str | Path) -> AstModel:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    header, start = _parse(data)
    payload = memoryview(data)[start:]
    params = {}
    try:
        for t in header["tensors"]:
            lo, n = int(t["offset"]), int(t["nbytes"])
            if lo < 0 or lo + n > len(payload):
                raise CheckpointError(f"truncated payload for tensor {t['name']}")
            arr = np.frombuffer(payload[lo : lo + n], dtype=np.dtype(t["dtype"]))
            params[t["name"]] = arr.reshape(t["shape"]).astype(arr.dtype.newbyteorder("="))
        cfg = AstConfig(**header["config"])
        lora = header["lora"]
        if lora is not None:
            lora = LoraSpec(**{**lora, "target_selectors": tuple(lora["target_selectors"])})
    except CheckpointError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"corrupt checkpoint: {exc}") from exc
    return AstModel(cfg, params, lora, frozenset(header["frozen"]))
