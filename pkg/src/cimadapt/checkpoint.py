"""Binary checkpoints: magic, version, JSON header, raw little-endian float64 blobs.

Layout::

    b"CIMCKPT\\0"  | u32 version | u64 header length | header (UTF-8 JSON) | blobs

The header carries the graph description and, per tensor, its name, shape,
trainable flag, offset and byte length inside the blob section.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .engine import Parameter
from .model import ModelGraph

MAGIC = b"CIMCKPT\x00"
VERSION = 1
_PREFIX = struct.Struct("<8sIQ")


class CheckpointError(ValueError):
    pass


def _blob(a: np.ndarray) -> bytes:
    return np.ascontiguousarray(a, dtype="<f8").tobytes()


def save_checkpoint(model: ModelGraph, path, meta: dict | None = None) -> None:
    entries, blobs, offset = [], [], 0
    for kind, store in (("param", model.params), ("buffer", model.buffers)):
        for name in sorted(store):
            value = store[name]
            data = value.data if kind == "param" else np.asarray(value)
            raw = _blob(data)
            entry = {"kind": kind, "name": name, "shape": list(data.shape), "offset": offset, "nbytes": len(raw)}
            if kind == "param":
                entry["trainable"] = bool(value.trainable)
            entries.append(entry)
            blobs.append(raw)
            offset += len(raw)
    header = {"format_version": VERSION, "model": model.describe(), "tensors": entries, "meta": meta or {}}
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, VERSION, len(head)))
        fh.write(head)
        for raw in blobs:
            fh.write(raw)


def read_header(raw: bytes) -> tuple[dict, int]:
    if len(raw) < _PREFIX.size or raw[:8] != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic bytes)")
    _, version, hlen = _PREFIX.unpack_from(raw)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
    start = _PREFIX.size
    if len(raw) < start + hlen:
        raise CheckpointError("truncated checkpoint: header incomplete")
    try:
        header = json.loads(raw[start:start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from exc
    return header, start + hlen


def load_checkpoint(path, with_meta: bool = False):
    raw = Path(path).read_bytes()
    header, base = read_header(raw)
    model = ModelGraph.from_description(header["model"])
    for e in header["tensors"]:
        lo = base + e["offset"]
        hi = lo + e["nbytes"]
        if hi > len(raw):
            raise CheckpointError(f"truncated checkpoint: tensor {e['name']!r} extends past end of file")
        data = np.frombuffer(raw[lo:hi], dtype="<f8").astype(np.float64).reshape(e["shape"])
        if e["kind"] == "param":
            model.params[e["name"]] = Parameter(data, trainable=e["trainable"], name=e["name"])
        else:
            model.buffers[e["name"]] = data
    if with_meta:
        return model, header.get("meta", {})
    return model
