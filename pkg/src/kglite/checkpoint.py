"""Binary checkpoint format: header, JSON manifest, packed float64 blobs.

Layout:
  bytes 0..3   magic b"KGLC"
  bytes 4..7   format version, little-endian u32
  bytes 8..15  manifest length in bytes, little-endian u64
  manifest     UTF-8 JSON: config dict plus a tensor index (name, shape,
               offset, nbytes, group, crc32); offsets are blob-relative
  blob         tensors packed back to back, little-endian float64

Serialization is deterministic: tensors sorted by name, manifest keys
sorted, no whitespace variation. Same parameters in, same bytes out.
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

MAGIC = b"KGLC"
VERSION = 1

BASE, POOLER, NSP_HEAD, ADAPTER = "base", "pooler", "nsp_head", "adapter"


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, params: dict[str, np.ndarray],
                    groups: dict[str, str], config: dict) -> Path:
    """Write named arrays with their group tags and a config dict."""
    names = sorted(params)
    if set(names) != set(groups):
        raise CheckpointError("params and groups must cover the same names")
    index = []
    blobs = []
    offset = 0
    for name in names:
        arr = np.ascontiguousarray(params[name], dtype="<f8")
        raw = arr.tobytes()
        index.append({"name": name, "shape": list(arr.shape), "offset": offset,
                      "nbytes": len(raw), "group": groups[name],
                      "crc32": zlib.crc32(raw)})
        blobs.append(raw)
        offset += len(raw)
    manifest = json.dumps({"config": config, "tensors": index},
                          sort_keys=True, separators=(",", ":")).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<Q", len(manifest)))
        fh.write(manifest)
        for raw in blobs:
            fh.write(raw)
    return path


class Checkpoint:
    def __init__(self, config: dict, tensors: dict[str, np.ndarray],
                 groups: dict[str, str]):
        self.config = config
        self.tensors = tensors
        self.groups = groups

    def group(self, name: str) -> dict[str, np.ndarray]:
        return {n: a for n, a in self.tensors.items() if self.groups[n] == name}


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 16 or raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    (version,) = struct.unpack("<I", raw[4:8])
    if version != VERSION:
        raise CheckpointError(f"{path}: format version {version}, "
                              f"expected {VERSION}")
    (mlen,) = struct.unpack("<Q", raw[8:16])
    if 16 + mlen > len(raw):
        raise CheckpointError(f"{path}: truncated manifest "
                              f"(need {mlen} bytes, have {len(raw) - 16})")
    try:
        manifest = json.loads(raw[16:16 + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: unreadable manifest: {e}") from None
    blob = raw[16 + mlen:]
    index = manifest["tensors"]

    expected = 0
    for entry in sorted(index, key=lambda e: e["offset"]):
        if entry["offset"] != expected:
            raise CheckpointError(f"{path}: tensor '{entry['name']}' at offset "
                                  f"{entry['offset']}, expected {expected} "
                                  f"(overlap or gap)")
        expected += entry["nbytes"]
    if expected != len(blob):
        raise CheckpointError(f"{path}: blob holds {len(blob)} bytes, manifest "
                              f"declares {expected}")

    tensors = {}
    groups = {}
    for entry in index:
        chunk = blob[entry["offset"]:entry["offset"] + entry["nbytes"]]
        if zlib.crc32(chunk) != entry["crc32"]:
            raise CheckpointError(
                f"{path}: checksum mismatch for '{entry['name']}' at blob "
                f"offset {entry['offset']}")
        arr = np.frombuffer(chunk, dtype="<f8").astype(np.float64)
        tensors[entry["name"]] = arr.reshape(entry["shape"])
        groups[entry["name"]] = entry["group"]
    return Checkpoint(manifest["config"], tensors, groups)


def model_groups(model, include_adapter: bool = True) -> dict[str, str]:
    """Group tag per named parameter of a model (+ attached adapter)."""
    out = {name: model.group_of(name) for name in model.parameters()}
    if include_adapter and model.adapter is not None:
        for name, _ in model.adapter.named_parameters():
            out[name] = ADAPTER
    return out


def save_model(path, model, config: dict, only_groups=None) -> Path:
    groups = model_groups(model)
    params = {name: t.data for name, t in model.named_parameters()}
    if only_groups is not None:
        keep = set(only_groups)
        params = {n: a for n, a in params.items() if groups[n] in keep}
        groups = {n: g for n, g in groups.items() if n in params}
    return save_checkpoint(path, params, groups, config)


def load_into_model(model, ckpt: Checkpoint, only_groups=None):
    """Copy checkpoint tensors into matching model parameters in place."""
    params = dict(model.named_parameters())
    names = (set(ckpt.tensors) if only_groups is None else
             {n for n in ckpt.tensors if ckpt.groups[n] in set(only_groups)})
    missing = sorted(n for n in names if n not in params)
    if missing:
        raise CheckpointError(f"checkpoint tensors absent from model: {missing}")
    for name in sorted(names):
        src = ckpt.tensors[name]
        dst = params[name]
        if tuple(src.shape) != dst.shape:
            raise CheckpointError(f"shape mismatch for '{name}': checkpoint "
                                  f"{tuple(src.shape)} vs model {dst.shape}")
        dst.data[...] = src
