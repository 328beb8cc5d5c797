"""Executes a :class:`ModelGraph` on the autodiff engine.

Modes:

``float``   conv and BN run separately (BN uses batch statistics when
            ``training``); conv inputs pass through the DAC quantizer once its
            step exists.
``phase1``  each conv+BN pair is folded on the fly (running statistics), the
            folded weight is fake-quantized with a learned step S_W.
``phase2``  as phase1 with S_W fixed, plus per-segment ADC quantization of
            the partial sums.
"""

from __future__ import annotations

import numpy as np

from .config import MacroConfig
from .engine import Tensor, as_tensor, no_grad
from .engine import functional as F
from .mapper import segment_layer
from .model import INPUT, LayerSpec, ModelGraph, fold_bn_arrays
from .quantizers import PsumQuantizerState, fake_quant_activations, fake_quant_weights, segmented_conv_forward

MODES = ("float", "phase1", "phase2")


def act_step_name(conv: str) -> str:
    return f"{conv}.act_step"


def weight_step_name(conv: str) -> str:
    return f"{conv}.weight_step"


def adc_step_name(conv: str) -> str:
    return f"{conv}.adc_step"


def folded_conv(model: ModelGraph, conv: LayerSpec):
    """(weight, bias) tensors after folding the successor BN, if any."""
    p = model.params
    w = p[f"{conv.name}.weight"]
    bias = p.get(f"{conv.name}.bias")
    bn = model.bn_after(conv)
    if bn is None:
        return w, bias
    return fold_bn_arrays(w, bias, p[f"{bn.name}.gamma"], p[f"{bn.name}.beta"],
                          model.buffers[f"{bn.name}.running_mean"], model.buffers[f"{bn.name}.running_var"])


def _conv(model: ModelGraph, layer: LayerSpec, x: Tensor, macro: MacroConfig, mode: str, capture,
          partial: bool = False):
    p = model.params
    rec = {} if capture is not None else None
    step = p.get(act_step_name(layer.name))
    qa = None
    if layer.act_quant and step is not None:
        x, qa = fake_quant_activations(x, step, macro.dac_max)
    elif mode == "phase2":
        raise RuntimeError(f"conv {layer.name!r} has no DAC step; phase2 needs quantized inputs")

    if mode == "float":
        out = F.conv2d(x, p[f"{layer.name}.weight"], p.get(f"{layer.name}.bias"), layer.stride, layer.padding)
    else:
        ws = p.get(weight_step_name(layer.name))
        if ws is None:
            raise RuntimeError(f"conv {layer.name!r} has no weight step; initialise Phase-1 first")
        w, b = folded_conv(model, layer)
        w_hat, qw = fake_quant_weights(w, ws, macro.weight_bounds)
        if mode == "phase1":
            out = F.conv2d(x, w_hat, None, layer.stride, layer.padding)
        else:
            adc = model.buffers.get(adc_step_name(layer.name))
            if adc is None and partial:
                out = F.conv2d(x, w_hat, None, layer.stride, layer.padding)
            elif adc is None:
                raise RuntimeError(f"conv {layer.name!r} has no ADC step; calibrate before phase2")
            else:
                seg = segment_layer(layer, macro).segment_bounds
                out = segmented_conv_forward(x, qa, w_hat, qw, seg, float(step.data), float(ws.data),
                                             PsumQuantizerState(float(adc), macro.adc_bounds),
                                             layer.stride, layer.padding, capture=rec)
        if b is not None:
            out = out + b.reshape(1, -1, 1, 1)
        if rec is not None:
            rec["qw"] = qw
    if rec is not None:
        rec["qa"] = qa
        capture[layer.name] = rec
    return out


def forward(model: ModelGraph, x, macro: MacroConfig, mode: str = "float", training: bool = False,
            capture: dict | None = None, partial: bool = False) -> Tensor:
    """Run the graph; ``partial`` lets phase2 treat convs without an ADC step as phase1."""
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    values = {INPUT: as_tensor(x)}
    folded_bn = set()
    if mode != "float":
        for conv in model.conv_layers():
            bn = model.bn_after(conv)
            if bn is not None:
                folded_bn.add(bn.name)
    p = model.params
    for layer in model.layers:
        src = [values[s] for s in layer.inputs]
        k, n = layer.kind, layer.name
        if k == "conv":
            out = _conv(model, layer, src[0], macro, mode, capture, partial)
        elif k == "batchnorm":
            if n in folded_bn:
                out = src[0]
            else:
                out = F.batch_norm(src[0], p[f"{n}.gamma"], p[f"{n}.beta"], model.buffers[f"{n}.running_mean"],
                                   model.buffers[f"{n}.running_var"], training)
        elif k == "relu":
            out = F.relu(src[0])
        elif k == "maxpool":
            out = F.max_pool2d(src[0], layer.kernel_size, layer.stride)
        elif k == "avgpool":
            out = F.avg_pool2d(src[0], layer.kernel_size or None, layer.stride if layer.kernel_size else None)
        elif k == "linear":
            out = F.linear(src[0], p[f"{n}.weight"], p.get(f"{n}.bias"))
        elif k == "residual-add":
            out = src[0] + src[1]
        else:  # pragma: no cover - LayerSpec validates kinds
            raise ValueError(k)
        values[n] = out
    return values[model.output]


def predict(model: ModelGraph, x, macro: MacroConfig, mode: str = "float") -> np.ndarray:
    with no_grad():
        return forward(model, x, macro, mode).data
