"""Integer simulator of the macro datapath.

Per conv layer: DAC codes drive the wordlines, every column forms an exact
integer dot product over its segment's rows, an ADC digitizes it
(clip + round), the adder tree sums a filter's segment codes and the result
is rescaled digitally (multiply, or shift in power-of-two mode) before the
float bias is added.  Everything outside the convs (ReLU, pooling, residual
adds, the linear head) runs in float64 exactly as in the training graph.

ADC multiplexing only affects timing: columns are converted ``adc_count`` at
a time inside each tile, which is what the cycle counter records.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .config import MacroConfig, round_half_away
from .intmodel import IntegerLayer, IntegerModel
from .model import INPUT
from .quantizers import saturated


class SimulationError(RuntimeError):
    pass


@dataclass
class LayerTrace:
    layer: str
    conversions: int = 0  # per inference
    cycles: int = 0  # per inference
    clip_events: int = 0  # over the whole batch
    max_abs_psum: int = 0


@dataclass
class SimTrace:
    images: int = 0
    layers: list[LayerTrace] = field(default_factory=list)

    @property
    def conversions(self) -> int:
        return sum(t.conversions for t in self.layers)

    @property
    def cycles(self) -> int:
        return sum(t.cycles for t in self.layers)

    @property
    def clip_events(self) -> int:
        return sum(t.clip_events for t in self.layers)

    @property
    def max_abs_psum(self) -> int:
        return max((t.max_abs_psum for t in self.layers), default=0)

    def to_json(self) -> dict:
        return {"images": self.images, "conversions": self.conversions, "cycles": self.cycles,
                "clip_events": self.clip_events, "max_abs_psum": self.max_abs_psum,
                "layers": [asdict(t) for t in self.layers]}


def dac_quantize_input(x, act_step: float, dac_bits: int = 4) -> np.ndarray:
    if not act_step > 0:
        raise SimulationError(f"DAC step must be positive, got {act_step}")
    top = 2 ** dac_bits - 1
    return round_half_away(np.clip(np.asarray(x, dtype=np.float64) / act_step, 0.0, top)).astype(np.int64)


def _patches(qa: np.ndarray, k: int, stride: int, padding: int):
    n, c, h, w = qa.shape
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1
    xp = np.pad(qa, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    # rows ordered (channel, ky, kx), the order a column stores its weights in
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k), ho, wo


def simulate_layer(qa: np.ndarray, layer: IntegerLayer, macro: MacroConfig, first_column: int = 0):
    """Run one conv on integer DAC codes.

    Returns ``(codes, out_int, trace)``: ADC codes shaped (segments, N, Cout,
    Ho, Wo), the adder-tree sums (N, Cout, Ho, Wo) and a :class:`LayerTrace`.
    ``first_column`` is the layer's first column in the mapping, which fixes
    how its columns fall into tiles.
    """
    a = layer.attrs
    qw = np.asarray(layer.arrays["qw"], dtype=np.int64)
    qa = np.asarray(qa, dtype=np.int64)
    if qa.ndim != 4 or qa.shape[1] != a["in_channels"]:
        raise SimulationError(f"{layer.name}: expected {a['in_channels']} input channels, got shape {qa.shape}")
    if qa.min(initial=0) < 0 or qa.max(initial=0) > macro.dac_max:
        raise SimulationError(f"{layer.name}: DAC codes outside [0, {macro.dac_max}]")
    k = a["kernel_size"]
    n = qa.shape[0]
    cout = a["out_channels"]
    seg = layer.segment_bounds
    kk = k * k
    if seg[-1][1] != qw.shape[1]:
        raise SimulationError(f"{layer.name}: segmentation does not cover the weight's input channels")
    patches, ho, wo = _patches(qa, k, a["stride"], a["padding"])
    positions = ho * wo
    bounds = macro.adc_bounds
    limit = macro.wordlines * max(macro.weight_bounds.q_n, macro.weight_bounds.q_p) * macro.dac_max
    d = a["divisor"]
    n_cols = len(seg) * cout
    codes = np.zeros((len(seg), n * positions, cout), dtype=np.int64)
    trace = LayerTrace(layer.name)
    width, adc = macro.bitlines_per_macro, macro.adc_count
    j = 0
    while j < n_cols:
        tile_end = min(n_cols, ((first_column + j) // width + 1) * width - first_column)
        while j < tile_end:
            g_end = min(j + adc, tile_end)  # one ADC round: up to adc_count columns of this tile
            trace.cycles += positions
            trace.conversions += positions * (g_end - j)
            c = j
            while c < g_end:
                s = c // cout
                f0, f1 = c % cout, min(cout, c % cout + g_end - c)
                c0, c1 = seg[s]
                cols = qw[f0:f1, c0:c1].reshape(f1 - f0, -1)
                p = patches[:, c0 * kk:c1 * kk] @ cols.T
                peak = int(np.abs(p).max(initial=0))
                if peak > limit:
                    raise SimulationError(f"{layer.name}: accumulator reached {peak}, above the {limit} bound")
                trace.max_abs_psum = max(trace.max_abs_psum, peak)
                v = p / d
                trace.clip_events += int(saturated(v, bounds).sum())
                codes[s, :, f0:f1] = round_half_away(np.clip(v, -bounds.q_n, bounds.q_p)).astype(np.int64)
                c += f1 - f0
            j = g_end
    codes = codes.reshape(len(seg), n, ho, wo, cout).transpose(0, 1, 4, 2, 3)
    return codes, codes.sum(axis=0), trace


def _rescale(out_int: np.ndarray, layer: IntegerLayer) -> np.ndarray:
    a = layer.attrs
    if a.get("shift") is not None:
        y = np.ldexp(out_int.astype(np.float64), a["shift"])
    else:
        y = out_int * a["scale"]
    return y + layer.arrays["bias"].reshape(1, -1, 1, 1)


def simulate_inference(model: IntegerModel, images, capture: dict | None = None):
    """Run a batch (N, C, H, W) or a single image (C, H, W); returns (logits, SimTrace).

    ``capture`` (optional dict) receives per-conv ``{"qa", "codes"}``.
    """
    x = np.asarray(images, dtype=np.float64)
    if x.ndim == 3:
        x = x[None]
    expect = (model.input_channels, model.input_resolution, model.input_resolution)
    if x.ndim != 4 or x.shape[1:] != expect:
        raise SimulationError(f"input shape {x.shape} does not match model input (N, {expect})")
    macro = model.macro
    values = {INPUT: x}
    trace = SimTrace(images=len(x))
    column = 0
    for layer in model.layers:
        src = [values[s] for s in layer.inputs]
        k = layer.kind
        if k == "conv":
            qa = dac_quantize_input(src[0], layer.attrs["act_step"], macro.dac_bits)
            codes, out_int, t = simulate_layer(qa, layer, macro, column)
            column += len(layer.attrs["segment_channels"]) * layer.attrs["out_channels"]
            trace.layers.append(t)
            if capture is not None:
                capture[layer.name] = {"qa": qa, "codes": codes}
            out = _rescale(out_int, layer)
        elif k == "relu":
            out = np.maximum(src[0], 0.0)
        elif k == "maxpool":
            ks, st = layer.attrs["kernel_size"], layer.attrs["stride"] or layer.attrs["kernel_size"]
            n, c, h, w = src[0].shape
            ho, wo = (h - ks) // st + 1, (w - ks) // st + 1
            win = sliding_window_view(src[0], (ks, ks), axis=(2, 3))[:, :, ::st, ::st][:, :, :ho, :wo]
            out = win.reshape(n, c, ho, wo, ks * ks).max(axis=-1)
        elif k == "avgpool":
            ks = layer.attrs["kernel_size"]
            if not ks:
                out = src[0].mean(axis=(2, 3), keepdims=True)
            else:
                st = layer.attrs["stride"] or ks
                n, c, h, w = src[0].shape
                ho, wo = (h - ks) // st + 1, (w - ks) // st + 1
                out = sliding_window_view(src[0], (ks, ks), axis=(2, 3))[:, :, ::st, ::st][:, :, :ho, :wo].mean(
                    axis=(-2, -1))
        elif k == "linear":
            flat = src[0].reshape(len(src[0]), -1)
            w = layer.arrays["weight"]
            if flat.shape[1] != w.shape[1]:
                raise SimulationError(f"{layer.name}: {flat.shape[1]} features for a {w.shape} weight")
            out = flat @ w.T
            if "bias" in layer.arrays:
                out = out + layer.arrays["bias"]
        elif k == "residual-add":
            if src[0].shape != src[1].shape:
                raise SimulationError(f"{layer.name}: residual shapes {src[0].shape} and {src[1].shape} differ")
            out = src[0] + src[1]
        else:
            raise SimulationError(f"{layer.name}: unsupported layer kind {k!r} in an integer model")
        values[layer.name] = out
    return values[model.layers[-1].name], trace
