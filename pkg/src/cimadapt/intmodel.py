"""Exported integer model and its on-disk format.

Layout::

    b"CIMQNT\\0\\0" | u32 version | u64 header length | header (UTF-8 JSON) | blobs

Conv weights are stored column by column in mapping order (segment-major,
each column holding one filter segment's ``channels * k * k`` rows) as packed
two's-complement nibbles, low nibble first, when ``weight_bits <= 4``, else
as int8.  Float arrays (biases, linear weights) are little-endian float64.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import MacroConfig

MAGIC = b"CIMQNT\x00\x00"
VERSION = 1
_PREFIX = struct.Struct("<8sIQ")


class IntegerModelError(ValueError):
    pass


@dataclass
class IntegerLayer:
    name: str
    kind: str
    inputs: list[str]
    attrs: dict = field(default_factory=dict)
    arrays: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def segment_bounds(self) -> list[tuple[int, int]]:
        out, start = [], 0
        for c in self.attrs["segment_channels"]:
            out.append((start, start + c))
            start += c
        return out


@dataclass
class IntegerModel:
    macro: MacroConfig
    input_channels: int
    input_resolution: int
    num_classes: int
    layers: list[IntegerLayer]
    power_of_two: bool = False

    def layer(self, name: str) -> IntegerLayer:
        for layer in self.layers:
            if layer.name == name:
                return layer
        raise KeyError(name)

    def convs(self) -> list[IntegerLayer]:
        return [layer for layer in self.layers if layer.kind == "conv"]

    def scale_report(self) -> list[dict]:
        return [{"layer": c.name, "scale": c.attrs["scale"], "shift": c.attrs["shift"],
                 "relative_error": c.attrs["scale_error"]} for c in self.convs()]


# -- weight packing ---------------------------------------------------------------


def weights_to_columns(qw: np.ndarray, segment_channels) -> np.ndarray:
    """Flatten (Cout, Cin, k, k) into mapping column order."""
    parts, start = [], 0
    for c in segment_channels:
        parts.append(qw[:, start:start + c].reshape(qw.shape[0], -1).ravel())
        start += c
    return np.concatenate(parts)


def columns_to_weights(flat: np.ndarray, shape, segment_channels) -> np.ndarray:
    cout, cin, k, _ = shape
    out = np.empty(shape, dtype=flat.dtype)
    pos, start = 0, 0
    for c in segment_channels:
        n = cout * c * k * k
        out[:, start:start + c] = flat[pos:pos + n].reshape(cout, c, k, k)
        pos += n
        start += c
    return out


def pack_nibbles(values: np.ndarray) -> bytes:
    v = np.asarray(values, dtype=np.int64)
    if v.size and (v.min() < -8 or v.max() > 7):
        raise IntegerModelError("values outside the signed 4-bit range")
    u = (v & 0xF).astype(np.uint8)
    if u.size % 2:
        u = np.append(u, np.uint8(0))
    return (u[0::2] | (u[1::2] << 4)).astype(np.uint8).tobytes()


def unpack_nibbles(raw: bytes, count: int) -> np.ndarray:
    b = np.frombuffer(raw, dtype=np.uint8)
    u = np.empty(b.size * 2, dtype=np.int16)
    u[0::2] = b & 0xF
    u[1::2] = b >> 4
    u = u[:count]
    return np.where(u >= 8, u - 16, u).astype(np.int8)


# -- file IO ----------------------------------------------------------------------


def save_integer_model(model: IntegerModel, path) -> None:
    nibbles = model.macro.weight_bits <= 4
    blobs, offset, layers = [], 0, []
    for layer in model.layers:
        entries = []
        for key in sorted(layer.arrays):
            a = layer.arrays[key]
            if key == "qw":
                flat = weights_to_columns(a, layer.attrs["segment_channels"])
                raw = pack_nibbles(flat) if nibbles else flat.astype("<i1").tobytes()
                enc = "nibble" if nibbles else "int8"
            elif key == "bias_codes":
                raw, enc = np.ascontiguousarray(a, dtype="<i8").tobytes(), "int64"
            else:
                raw, enc = np.ascontiguousarray(a, dtype="<f8").tobytes(), "float64"
            entries.append({"key": key, "shape": list(a.shape), "encoding": enc, "offset": offset, "nbytes": len(raw)})
            blobs.append(raw)
            offset += len(raw)
        layers.append({"name": layer.name, "kind": layer.kind, "inputs": layer.inputs,
                       "attrs": layer.attrs, "arrays": entries})
    header = {
        "format_version": VERSION, "macro": model.macro.to_json(), "input_channels": model.input_channels,
        "input_resolution": model.input_resolution, "num_classes": model.num_classes,
        "power_of_two": model.power_of_two, "layers": layers,
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, VERSION, len(head)))
        fh.write(head)
        for raw in blobs:
            fh.write(raw)


def load_integer_model(path) -> IntegerModel:
    raw = Path(path).read_bytes()
    if len(raw) < _PREFIX.size or raw[:8] != MAGIC:
        raise IntegerModelError(f"{path}: not an integer model file (bad magic bytes)")
    _, version, hlen = _PREFIX.unpack_from(raw)
    if version != VERSION:
        raise IntegerModelError(f"{path}: unsupported version {version} (expected {VERSION})")
    base = _PREFIX.size + hlen
    if len(raw) < base:
        raise IntegerModelError(f"{path}: truncated header")
    header = json.loads(raw[_PREFIX.size:base].decode("utf-8"))
    layers = []
    for spec in header["layers"]:
        arrays = {}
        for e in spec["arrays"]:
            lo, hi = base + e["offset"], base + e["offset"] + e["nbytes"]
            if hi > len(raw):
                raise IntegerModelError(f"{path}: truncated blob for {spec['name']}.{e['key']}")
            chunk = raw[lo:hi]
            shape = tuple(e["shape"])
            if e["encoding"] in ("nibble", "int8"):
                count = int(np.prod(shape))
                flat = unpack_nibbles(chunk, count) if e["encoding"] == "nibble" else np.frombuffer(chunk, "<i1")
                a = columns_to_weights(flat.astype(np.int8), shape, spec["attrs"]["segment_channels"])
            elif e["encoding"] == "int64":
                a = np.frombuffer(chunk, "<i8").astype(np.int64).reshape(shape)
            else:
                a = np.frombuffer(chunk, "<f8").astype(np.float64).reshape(shape)
            arrays[e["key"]] = a
        layers.append(IntegerLayer(spec["name"], spec["kind"], spec["inputs"], spec["attrs"], arrays))
    return IntegerModel(MacroConfig.from_json(header["macro"]), header["input_channels"],
                        header["input_resolution"], header["num_classes"], layers, header["power_of_two"])
