"""QAT stages (Phase-1 weight quantization, ADC calibration, Phase-2 partial-sum
quantization) and export of the trained model to integer form."""

from __future__ import annotations

import logging
import math

import numpy as np

from .config import MacroConfig, round_half_away
from .data import Dataset
from .engine import Parameter, no_grad
from .intmodel import IntegerLayer, IntegerModel
from .mapper import segment_layer
from .model import ModelGraph, fold_bn_arrays
from .network import act_step_name, adc_step_name, folded_conv, forward, weight_step_name
from .quantizers import (
    QuantError,
    STEP_FLOOR,
    adc_divisor,
    saturated,
    init_weight_step,
    integer_partial_sums,
    output_scale,
    quantize_weights,
)
from .training import DEFAULT_BATCH, train

log = logging.getLogger(__name__)

MAX_SHIFT = 31


def _freeze_act_steps(model: ModelGraph) -> None:
    for conv in model.conv_layers():
        p = model.params.get(act_step_name(conv.name))
        if p is not None:
            p.freeze()


def init_weight_steps(model: ModelGraph, macro: MacroConfig) -> None:
    """Create S_W for every conv from its BN-folded weight (no-op where it exists)."""
    for conv in model.conv_layers():
        name = weight_step_name(conv.name)
        if name in model.params:
            continue
        w, _ = folded_conv(model, conv)
        model.params[name] = Parameter(np.asarray(init_weight_step(w.data, macro.weight_bounds.q_p)), name=name)


def phase1_train(model: ModelGraph, macro: MacroConfig, data: Dataset, epochs: int, lr: float = 1e-3,
                 rng: np.random.Generator | None = None, batch_size: int = DEFAULT_BATCH) -> ModelGraph:
    """Weight-only fake quantization on folded conv+BN; trains W, BN affine and S_W.

    BN running statistics are frozen (the fold uses them), as are the DAC steps.
    """
    for conv in model.conv_layers():
        if conv.act_quant and act_step_name(conv.name) not in model.params:
            raise QuantError(f"conv {conv.name!r} has no DAC step; train the seed model first")
    init_weight_steps(model, macro)
    _freeze_act_steps(model)
    if epochs > 0:
        train(model, macro, data, epochs, lr, rng or np.random.default_rng(0), mode="phase1", batch_size=batch_size)
    return model


def calibrate_adc_step(model: ModelGraph, macro: MacroConfig, batch: np.ndarray,
                       percentile: float = 99.9) -> dict[str, float]:
    """Set each conv's S_ADC from the pre-ADC values Qw * x_hat on ``batch``.

    S_ADC = percentile(|values|) / q_p_ADC, floored at 1e-8.  Layers are
    calibrated in order, each on the inputs it sees once every upstream conv
    already quantizes its partial sums, i.e. on its actual Phase-2 inputs.
    """
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 4 or len(batch) == 0:
        raise QuantError("calibrate_adc_step needs a non-empty (N, C, H, W) batch")
    for conv in model.conv_layers():
        model.buffers.pop(adc_step_name(conv.name), None)
    q_p = macro.adc_bounds.q_p
    steps = {}
    for conv in model.conv_layers():
        capture: dict = {}
        with no_grad():
            forward(model, batch, macro, "phase2", capture=capture, partial=True)
        rec = capture[conv.name]
        seg = segment_layer(conv, macro).segment_bounds
        sums, _, _, _ = integer_partial_sums(rec["qa"], rec["qw"], seg, conv.stride, conv.padding)
        s_a = float(model.params[act_step_name(conv.name)].data)
        values = np.abs(np.concatenate([p.ravel() for p in sums])) * s_a
        step = max(float(np.percentile(values, percentile, method="higher")) / q_p, STEP_FLOOR)
        model.buffers[adc_step_name(conv.name)] = np.asarray(step)
        steps[conv.name] = step
    return steps


def clipping_rate(model: ModelGraph, macro: MacroConfig, batch: np.ndarray) -> dict[str, float]:
    """Fraction of partial sums whose ADC code saturated under the Phase-2 forward.

    A partial sum counts as clipped when rounding alone would have produced a
    code outside the ADC range (see :func:`saturated`).
    """
    capture: dict = {}
    with no_grad():
        forward(model, batch, macro, "phase2", capture=capture)
    bounds = macro.adc_bounds
    out = {}
    for conv in model.conv_layers():
        rec = capture[conv.name]
        d = adc_divisor(model.buffers[adc_step_name(conv.name)], model.params[act_step_name(conv.name)].data)
        v = np.concatenate([p.ravel() for p in rec["psums"]]) / d
        out[conv.name] = float(saturated(v, bounds).mean())
    return out


def phase2_train(model: ModelGraph, macro: MacroConfig, data: Dataset, epochs: int, lr: float = 1e-2,
                 rng: np.random.Generator | None = None, batch_size: int = DEFAULT_BATCH) -> ModelGraph:
    """Segmented partial-sum QAT; S_W, S_A and S_ADC stay fixed."""
    for conv in model.conv_layers():
        if weight_step_name(conv.name) not in model.params:
            raise QuantError(f"conv {conv.name!r} has no weight step; run Phase-1 first")
        if adc_step_name(conv.name) not in model.buffers:
            raise QuantError(f"conv {conv.name!r} has no ADC step; calibrate before Phase-2")
        model.params[weight_step_name(conv.name)].freeze()
    _freeze_act_steps(model)
    if epochs > 0:
        train(model, macro, data, epochs, lr, rng or np.random.default_rng(0), mode="phase2", batch_size=batch_size)
    return model


# -- export ---------------------------------------------------------------------


def power_of_two(scale: float) -> tuple[int, float]:
    """(exponent e, relative error) for approximating ``scale`` by 2**e."""
    if not scale > 0:
        raise QuantError(f"scale must be positive, got {scale}")
    e = math.log2(scale)
    if abs(e) > MAX_SHIFT:
        raise QuantError(f"scale {scale:g} needs a shift of {e:.1f} bits (limit {MAX_SHIFT})")
    shift = int(round_half_away(e))
    return shift, abs(2.0 ** shift - scale) / scale


def export_integer_model(model: ModelGraph, macro: MacroConfig, power_of_two_scale: bool = False) -> IntegerModel:
    """Fold BN, quantize weights and collect every step size the integer pipeline needs.

    The folded bias stays a float added after scaling; its value in output
    codes is recorded as ``bias_codes`` for reference.
    """
    p, b = model.params, model.buffers
    removed = {}
    layers = []
    for layer in model.layers:
        if layer.kind == "batchnorm" and layer.name in removed:
            continue
        inputs = [removed.get(s, s) for s in layer.inputs]
        if layer.kind == "conv":
            for key in (act_step_name(layer.name), weight_step_name(layer.name)):
                if key not in p:
                    raise QuantError(f"conv {layer.name!r} lacks {key}; finish QAT before export")
            if adc_step_name(layer.name) not in b:
                raise QuantError(f"conv {layer.name!r} has no ADC step; calibrate before export")
            bn = model.bn_after(layer)
            bias = p[f"{layer.name}.bias"].data if layer.bias else None
            if bn is not None:
                w, bias = fold_bn_arrays(p[f"{layer.name}.weight"].data, bias, p[f"{bn.name}.gamma"].data,
                                         p[f"{bn.name}.beta"].data, b[f"{bn.name}.running_mean"],
                                         b[f"{bn.name}.running_var"])
                removed[bn.name] = layer.name
            else:
                w = p[f"{layer.name}.weight"].data
            if bias is None:
                bias = np.zeros(layer.out_channels)
            s_a = float(p[act_step_name(layer.name)].data)
            s_w = float(p[weight_step_name(layer.name)].data)
            s_adc = float(b[adc_step_name(layer.name)])
            qw, _ = quantize_weights(w, s_w, macro.weight_bounds)
            scale = output_scale(s_w, s_adc)
            shift, err = power_of_two(scale) if power_of_two_scale else (None, 0.0)
            if power_of_two_scale:
                scale = 2.0 ** shift
            attrs = {
                "in_channels": layer.in_channels, "out_channels": layer.out_channels,
                "kernel_size": layer.kernel_size, "stride": layer.stride, "padding": layer.padding,
                "segment_channels": segment_layer(layer, macro).segment_channels,
                "act_step": s_a, "weight_step": s_w, "adc_step": s_adc,
                "divisor": adc_divisor(s_adc, s_a), "scale": scale, "shift": shift, "scale_error": err,
            }
            arrays = {"qw": qw.astype(np.int8), "bias": np.asarray(bias, dtype=np.float64),
                      "bias_codes": round_half_away(np.asarray(bias) / scale).astype(np.int64)}
        elif layer.kind == "linear":
            attrs = {"in_channels": layer.in_channels, "out_channels": layer.out_channels}
            arrays = {"weight": p[f"{layer.name}.weight"].data.copy()}
            if f"{layer.name}.bias" in p:
                arrays["bias"] = p[f"{layer.name}.bias"].data.copy()
        elif layer.kind == "batchnorm":
            raise QuantError(f"batchnorm {layer.name!r} does not follow a conv; cannot fold for export")
        elif layer.kind in ("maxpool", "avgpool"):
            attrs = {"kernel_size": layer.kernel_size, "stride": layer.stride}
            arrays = {}
        else:
            attrs, arrays = {}, {}
        layers.append(IntegerLayer(layer.name, layer.kind, inputs, attrs, arrays))
    return IntegerModel(macro, model.input_channels, model.input_resolution, model.num_classes, layers,
                        power_of_two=power_of_two_scale)
