"""Column mapping of conv filters onto macro tiles and the derived hardware metrics.

A filter whose input channels exceed one column's wordline budget is split
into segments; each (segment, filter) pair occupies one column.  Inside a layer
columns are laid out segment-major (all filters' first segment, then all
filters' second segment, ...).  Layers are packed greedily, in order, into
tiles of ``bitlines_per_macro`` columns.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .config import MacroConfig, channels_per_bitline
from .model import LayerSpec, ModelGraph


class MappingError(ValueError):
    pass


@dataclass
class LayerMapping:
    layer: str
    in_channels: int
    out_channels: int
    kernel_size: int
    segment_channels: list[int]
    out_hw: tuple[int, int] = (1, 1)
    first_column: int = 0

    @property
    def segments(self) -> int:
        return len(self.segment_channels)

    @property
    def columns(self) -> int:
        return self.segments * self.out_channels

    @property
    def rows_used(self) -> list[int]:
        return [c * self.kernel_size ** 2 for c in self.segment_channels]

    @property
    def segment_bounds(self) -> list[tuple[int, int]]:
        """Input-channel ranges [start, stop) for each segment."""
        out, start = [], 0
        for c in self.segment_channels:
            out.append((start, start + c))
            start += c
        return out

    @property
    def positions(self) -> int:
        return self.out_hw[0] * self.out_hw[1]

    def column_of(self, segment: int, filt: int) -> int:
        return self.first_column + segment * self.out_channels + filt

    @property
    def cells(self) -> int:
        return self.out_channels * sum(self.rows_used)


def segment_layer(layer: LayerSpec, macro: MacroConfig) -> LayerMapping:
    """Split a conv's input channels into column-sized segments."""
    if layer.kind != "conv":
        raise MappingError(f"segment_layer: {layer.name!r} is a {layer.kind}, not a conv")
    cpb = channels_per_bitline(macro, layer.kernel_size)
    n_seg = math.ceil(layer.in_channels / cpb)
    seg = [cpb] * (n_seg - 1) + [layer.in_channels - cpb * (n_seg - 1)]
    return LayerMapping(layer.name, layer.in_channels, layer.out_channels, layer.kernel_size, seg)


@dataclass
class MappingPlan:
    macro: MacroConfig
    layers: list[LayerMapping] = field(default_factory=list)

    @property
    def used_bls(self) -> int:
        return sum(m.columns for m in self.layers)

    @property
    def tiles(self) -> int:
        return max(1, math.ceil(self.used_bls / self.macro.bitlines_per_macro))

    def tile_of(self, column: int) -> int:
        return column // self.macro.bitlines_per_macro

    def tile_columns(self, m: LayerMapping) -> dict[int, int]:
        """Number of the layer's columns that land in each tile."""
        width = self.macro.bitlines_per_macro
        out: dict[int, int] = {}
        start, stop = m.first_column, m.first_column + m.columns
        while start < stop:
            t = start // width
            end = min(stop, (t + 1) * width)
            out[t] = end - start
            start = end
        return out

    def spans_loads(self, m: LayerMapping) -> bool:
        """True when some filter's segments are stored in different tiles."""
        if m.segments < 2:
            return False
        for f in range(m.out_channels):
            tiles = {self.tile_of(m.column_of(s, f)) for s in range(m.segments)}
            if len(tiles) > 1:
                return True
        return False

    def layer(self, name: str) -> LayerMapping:
        for m in self.layers:
            if m.layer == name:
                return m
        raise KeyError(name)


def build_plan(model: ModelGraph, macro: MacroConfig, input_resolution: int | None = None) -> MappingPlan:
    shapes = model.infer_shapes(input_resolution)
    plan = MappingPlan(macro)
    col = 0
    for layer in model.conv_layers():
        m = segment_layer(layer, macro)
        m.out_hw = shapes[layer.name][1:]
        m.first_column = col
        col += m.columns
        plan.layers.append(m)
    return plan


def used_bitlines(model: ModelGraph, macro: MacroConfig) -> int:
    return sum(segment_layer(layer, macro).columns for layer in model.conv_layers())


def load_weight_latency(used_bls: int, macro: MacroConfig) -> int:
    """Cycles to load all weights: one full-macro load per tile."""
    if used_bls < 0:
        raise MappingError("used_bls must be >= 0")
    width = macro.bitlines_per_macro
    return -(-used_bls // width) * width


def _as_plan(obj, macro: MacroConfig | None, input_resolution: int | None) -> MappingPlan:
    """Accept either a built plan or (model, macro[, input_resolution])."""
    if isinstance(obj, MappingPlan):
        return obj
    if macro is None:
        raise MappingError("a macro config is needed to map a model")
    return build_plan(obj, macro, input_resolution)


def adc_activations(plan, macro: MacroConfig | None = None, input_resolution: int | None = None) -> int:
    """Total ADC conversions for one inference: every column at every output position."""
    plan = _as_plan(plan, macro, input_resolution)
    return sum(m.positions * m.columns for m in plan.layers)


def computing_latency(plan, macro: MacroConfig | None = None, input_resolution: int | None = None) -> int:
    """Cycles for one inference; a tile converts at most ``adc_count`` columns per cycle."""
    plan = _as_plan(plan, macro, input_resolution)
    adc = plan.macro.adc_count
    total = 0
    for m in plan.layers:
        for n in plan.tile_columns(m).values():
            total += m.positions * -(-n // adc)
    return total


def partial_sum_storage(plan: MappingPlan, psum_word_bits: int | None = None) -> int:
    """Largest buffer (bits) needed for partial sums of a layer split across loads."""
    bits = psum_word_bits or plan.macro.adc_bits
    sizes = [m.positions * m.out_channels * bits for m in plan.layers if plan.spans_loads(m)]
    return max(sizes, default=0)


def macro_usage(plan: MappingPlan, target_bl: int) -> float:
    """Occupied cells over the cells of ``target_bl`` full-height columns."""
    if target_bl <= 0:
        raise MappingError("target_bl must be positive")
    cells = sum(m.cells for m in plan.layers)
    usage = cells / (target_bl * plan.macro.wordlines)
    if usage > 1.0:
        raise MappingError(f"plan exceeds budget: usage {usage:.4f} with target_bl={target_bl}")
    return usage


def plan_metrics(plan: MappingPlan, target_bl: int | None = None, psum_word_bits: int | None = None) -> dict:
    used = plan.used_bls
    metrics = {
        "BLs": used,
        "MACs": adc_activations(plan),
        "Partial-sum Storage": partial_sum_storage(plan, psum_word_bits),
        "Load Weight Latency": load_weight_latency(used, plan.macro),
        "Computing Latency": computing_latency(plan),
        "Tiles": plan.tiles,
    }
    if target_bl:
        metrics["Macro Usage"] = macro_usage(plan, target_bl) if used <= target_bl else None
    return metrics


def plan_to_json(plan: MappingPlan) -> dict:
    return {
        "macro": plan.macro.to_json(),
        "layers": [
            {
                "layer": m.layer,
                "in_channels": m.in_channels,
                "out_channels": m.out_channels,
                "kernel_size": m.kernel_size,
                "segment_channels": m.segment_channels,
                "rows_used": m.rows_used,
                "columns": m.columns,
                "first_column": m.first_column,
                "out_hw": list(m.out_hw),
                "tile_columns": {str(k): v for k, v in plan.tile_columns(m).items()},
            }
            for m in plan.layers
        ],
    }


# Fixed palette (tab20) so renders are reproducible without a colormap lookup.
PALETTE = np.array([
    (31, 119, 180), (255, 127, 14), (44, 160, 44), (214, 39, 40), (148, 103, 189),
    (140, 86, 75), (227, 119, 194), (127, 127, 127), (188, 189, 34), (23, 190, 207),
    (174, 199, 232), (255, 187, 120), (152, 223, 138), (255, 152, 150), (197, 176, 213),
    (196, 156, 148), (247, 182, 210), (199, 199, 199), (219, 219, 141), (158, 218, 229),
], dtype=np.uint8)
BLANK = np.array((255, 255, 255), dtype=np.uint8)


def occupancy(plan: MappingPlan) -> list[np.ndarray]:
    """Per-tile layer-index maps (wordlines x bitlines), -1 where a cell is unused."""
    wl, width = plan.macro.wordlines, plan.macro.bitlines_per_macro
    tiles = [np.full((wl, width), -1, dtype=np.int32) for _ in range(plan.tiles)]
    for idx, m in enumerate(plan.layers):
        rows = m.rows_used
        for s in range(m.segments):
            for f in range(m.out_channels):
                col = m.column_of(s, f)
                tiles[col // width][: rows[s], col % width] = idx
    return tiles


def render_mapping(plan: MappingPlan) -> list[np.ndarray]:
    """RGB raster per tile: one colour per layer, unused cells white."""
    images = []
    for occ in occupancy(plan):
        img = np.empty(occ.shape + (3,), dtype=np.uint8)
        img[:] = BLANK
        used = occ >= 0
        img[used] = PALETTE[occ[used] % len(PALETTE)]
        images.append(img)
    return images


def write_ppm(image: np.ndarray, path) -> None:
    h, w, _ = image.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(image, dtype=np.uint8).tobytes())
