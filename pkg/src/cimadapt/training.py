"""Training and evaluation loops shared by every stage."""

from __future__ import annotations

import logging
import math

import numpy as np

from .config import MacroConfig
from .data import Dataset
from .engine import Adam, Parameter, cross_entropy, no_grad
from .engine import functional as F
from .model import INPUT, ModelGraph
from .network import act_step_name, forward
from .quantizers import init_act_step, quantize_activations

log = logging.getLogger(__name__)

DEFAULT_BATCH = 64
SCHEDULES = ("cosine", "constant")


class TrainingDiverged(RuntimeError):
    pass


def train(model: ModelGraph, macro: MacroConfig, data: Dataset, epochs: int, lr: float,
          rng: np.random.Generator, mode: str = "float", batch_size: int = DEFAULT_BATCH,
          penalty=None, augment: dict | None = None, schedule: str = "cosine") -> list[float]:
    """Adam over all trainable parameters; returns the mean loss per epoch.

    ``penalty`` (optional) is called as ``penalty(epoch)`` at the start of
    each epoch and must return a callable producing an extra loss tensor.
    ``schedule`` is ``"cosine"`` (per-batch cosine decay from ``lr`` to 0) or
    ``"constant"``.
    """
    if schedule not in SCHEDULES:
        raise ValueError(f"unknown lr schedule {schedule!r}; choose from {SCHEDULES}")
    opt = Adam(model.trainable(), lr=lr)
    history = []
    augment = augment or {}
    total_steps = epochs * math.ceil(len(data) / batch_size)
    step = 0
    for epoch in range(epochs):
        extra = penalty(epoch) if penalty is not None else None
        total, count = 0.0, 0
        for b, (x, y) in enumerate(data.batches(batch_size, rng, **augment)):
            logits = forward(model, x, macro, mode, training=True)
            loss = cross_entropy(logits, y)
            if extra is not None:
                loss = loss + extra()
            value = float(loss.data)
            if not math.isfinite(value):
                raise TrainingDiverged(
                    f"loss became {value} in epoch {epoch}, batch {b} (mode={mode}, lr={lr}); "
                    f"last finite epoch loss {history[-1] if history else 'n/a'}"
                )
            if schedule == "cosine":
                opt.lr = 0.5 * lr * (1.0 + math.cos(math.pi * step / total_steps))
            opt.zero_grad()
            loss.backward()
            opt.step()
            step += 1
            total += value * len(y)
            count += len(y)
        history.append(total / max(count, 1))
        log.debug("%s epoch %d loss %.5f", mode, epoch, history[-1])
    return history


def logits(model: ModelGraph, macro: MacroConfig, images: np.ndarray, mode: str = "float",
           batch_size: int = 256) -> np.ndarray:
    out = []
    with no_grad():
        for start in range(0, len(images), batch_size):
            out.append(forward(model, images[start:start + batch_size], macro, mode).data)
    return np.concatenate(out)


def evaluate(model: ModelGraph, macro: MacroConfig, data: Dataset, mode: str = "float",
             batch_size: int = 256) -> float:
    """Top-1 accuracy in percent."""
    pred = logits(model, macro, data.images, mode, batch_size).argmax(axis=1)
    return 100.0 * float((pred == data.labels).mean())


def init_act_steps(model: ModelGraph, macro: MacroConfig, images: np.ndarray, trainable: bool = True) -> None:
    """Create DAC step sizes from the activations each conv sees on ``images``.

    Layers are walked in order with batch-statistics BN (buffers untouched), so
    each step is calibrated on the already-quantized upstream activations.
    """
    values = {INPUT: images}
    p = model.params
    with no_grad():
        for layer in model.layers:
            x = [values[s] for s in layer.inputs]
            k, n = layer.kind, layer.name
            if k == "conv":
                name = act_step_name(n)
                if layer.act_quant and name not in p:
                    p[name] = Parameter(np.asarray(init_act_step(x[0], macro.dac_max)), trainable=trainable, name=name)
                out = _quantized_conv(model, layer, x[0], macro)
            elif k == "batchnorm":
                out = F.batch_norm(x[0], p[f"{n}.gamma"], p[f"{n}.beta"], model.buffers[f"{n}.running_mean"].copy(),
                                   model.buffers[f"{n}.running_var"].copy(), training=True).data
            elif k == "relu":
                out = np.maximum(x[0], 0.0)
            elif k == "maxpool":
                out = F.max_pool2d(x[0], layer.kernel_size, layer.stride).data
            elif k == "avgpool":
                out = F.avg_pool2d(x[0], layer.kernel_size or None, layer.stride if layer.kernel_size else None).data
            elif k == "linear":
                out = F.linear(x[0], p[f"{n}.weight"], p.get(f"{n}.bias")).data
            else:
                out = x[0] + x[1]
            values[n] = out


def _quantized_conv(model: ModelGraph, layer, x: np.ndarray, macro: MacroConfig) -> np.ndarray:
    p = model.params
    step = p.get(act_step_name(layer.name))
    if layer.act_quant and step is not None:
        _, x = quantize_activations(x, float(step.data), macro.dac_max)
    return F.conv2d(x, p[f"{layer.name}.weight"], p.get(f"{layer.name}.bias"), layer.stride, layer.padding).data


def train_seed(model: ModelGraph, macro: MacroConfig, data: Dataset, epochs: int, lr: float = 1e-2,
               rng: np.random.Generator | None = None, batch_size: int = DEFAULT_BATCH,
               augment: dict | None = None, calibration: int = 256) -> list[float]:
    """Float training with learned DAC steps, initialised from the first ``calibration`` images."""
    rng = rng or np.random.default_rng(0)
    init_act_steps(model, macro, data.images[:calibration], trainable=True)
    return train(model, macro, data, epochs, lr, rng, batch_size=batch_size, augment=augment)
