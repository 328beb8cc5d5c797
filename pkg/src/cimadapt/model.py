"""Layer-level IR for the CNNs that get mapped onto the macro.

A :class:`ModelGraph` is an ordered list of :class:`LayerSpec` records plus a
flat parameter store.  Parameter names are ``<layer>.<field>``:

* conv: ``weight`` (Cout, Cin, k, k), optional ``bias``, ``act_step`` (DAC
  step S_A), ``weight_step`` (S_W, created by Phase-1); buffer ``adc_step``
* batchnorm: ``gamma``, ``beta``; buffers ``running_mean``, ``running_var``
* linear: ``weight`` (out, in), ``bias``
"""

from __future__ import annotations

import copy
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .engine import Parameter
from .engine.functional import BN_EPS, conv_output_size

log = logging.getLogger(__name__)

LAYER_KINDS = ("conv", "batchnorm", "relu", "maxpool", "avgpool", "linear", "residual-add")
INPUT = "input"


class GraphError(ValueError):
    pass


@dataclass
class LayerSpec:
    name: str
    kind: str
    inputs: list[str] = field(default_factory=list)
    in_channels: int = 0
    out_channels: int = 0
    kernel_size: int = 1
    stride: int = 1
    padding: int | None = None
    bias: bool = False
    act_quant: bool = True

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise GraphError(f"layer {self.name!r}: unknown kind {self.kind!r}")
        if self.kind == "conv":
            if self.in_channels < 1 or self.out_channels < 1:
                raise GraphError(f"conv {self.name!r}: channel counts must be >= 1")
            if self.padding is None:
                self.padding = self.kernel_size // 2
        if self.kind == "residual-add" and len(self.inputs) != 2:
            raise GraphError(f"residual-add {self.name!r} needs exactly two inputs")

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> LayerSpec:
        return cls(**obj)


def kaiming(rng: np.random.Generator, shape: tuple, fan_in: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / max(fan_in, 1)), size=shape)


class ModelGraph:
    def __init__(self, layers, input_channels: int = 3, input_resolution: int = 32,
                 num_classes: int = 10, arch: str = "custom"):
        self.layers: list[LayerSpec] = list(layers)
        self.input_channels = input_channels
        self.input_resolution = input_resolution
        self.num_classes = num_classes
        self.arch = arch
        self.params: dict[str, Parameter] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self._resolve_inputs()
        self.validate()

    # -- structure ------------------------------------------------------------

    def _resolve_inputs(self) -> None:
        prev = INPUT
        for layer in self.layers:
            if not layer.inputs:
                layer.inputs = [prev]
            prev = layer.name

    def layer(self, name: str) -> LayerSpec:
        for layer in self.layers:
            if layer.name == name:
                return layer
        raise KeyError(name)

    def consumers(self, name: str) -> list[LayerSpec]:
        return [layer for layer in self.layers if name in layer.inputs]

    def conv_layers(self) -> list[LayerSpec]:
        return [layer for layer in self.layers if layer.kind == "conv"]

    @property
    def output(self) -> str:
        return self.layers[-1].name

    def bn_after(self, conv: LayerSpec) -> LayerSpec | None:
        """The batchnorm consuming ``conv`` when it is the conv's sole consumer."""
        users = self.consumers(conv.name)
        if len(users) == 1 and users[0].kind == "batchnorm":
            return users[0]
        return None

    def validate(self) -> None:
        names = set()
        for layer in self.layers:
            if layer.name in names or layer.name == INPUT:
                raise GraphError(f"duplicate or reserved layer name {layer.name!r}")
            for src in layer.inputs:
                if src != INPUT and src not in names:
                    raise GraphError(f"layer {layer.name!r} reads {src!r} before it is produced (cycle or typo)")
            names.add(layer.name)
        if not self.layers:
            raise GraphError("model has no layers")
        self.infer_shapes()

    def infer_shapes(self, resolution: int | None = None) -> dict[str, tuple]:
        """Per-layer output shape (C, H, W), or (F,) after a linear layer."""
        res = resolution or self.input_resolution
        shapes: dict[str, tuple] = {INPUT: (self.input_channels, res, res)}
        for layer in self.layers:
            src = shapes[layer.inputs[0]]
            k = layer.kind
            if k == "conv":
                if len(src) != 3 or src[0] != layer.in_channels:
                    raise GraphError(f"conv {layer.name!r} expects {layer.in_channels} channels, gets {src}")
                h = conv_output_size(src[1], layer.kernel_size, layer.stride, layer.padding)
                w = conv_output_size(src[2], layer.kernel_size, layer.stride, layer.padding)
                if h < 1 or w < 1:
                    raise GraphError(f"conv {layer.name!r} kernel does not fit {src}")
                shapes[layer.name] = (layer.out_channels, h, w)
            elif k in ("batchnorm", "relu"):
                shapes[layer.name] = src
            elif k == "maxpool" or (k == "avgpool" and layer.kernel_size):
                s = layer.stride or layer.kernel_size
                shapes[layer.name] = (src[0], (src[1] - layer.kernel_size) // s + 1,
                                      (src[2] - layer.kernel_size) // s + 1)
                if min(shapes[layer.name][1:]) < 1:
                    raise GraphError(f"pool {layer.name!r} window larger than input {src}")
            elif k == "avgpool":
                shapes[layer.name] = (src[0], 1, 1)
            elif k == "linear":
                feat = int(np.prod(src))
                if layer.in_channels != feat:
                    raise GraphError(f"linear {layer.name!r} expects {layer.in_channels} features, gets {feat}")
                shapes[layer.name] = (layer.out_channels,)
            elif k == "residual-add":
                a, b = (shapes[s] for s in layer.inputs)
                if a != b:
                    raise GraphError(f"residual-add {layer.name!r}: shape mismatch {a} vs {b}")
                shapes[layer.name] = a
        return shapes

    def channel_groups(self) -> dict[str, str]:
        """Map every tensor (layer output or ``input``) to its channel-space id.

        Convolutions open a new space; pass-through layers inherit it; a
        residual add merges the spaces of its operands.  Pruning and expansion
        act on whole spaces so that residual operands stay aligned.
        """
        parent: dict[str, str] = {}

        def find(a):
            while parent[a] != a:
                parent[a] = parent[parent[a]]
                a = parent[a]
            return a

        space: dict[str, str] = {INPUT: INPUT}
        parent[INPUT] = INPUT
        for layer in self.layers:
            if layer.kind == "conv":
                space[layer.name] = layer.name
                parent[layer.name] = layer.name
            elif layer.kind == "linear":
                space[layer.name] = layer.name
                parent[layer.name] = layer.name
            elif layer.kind == "residual-add":
                a, b = (find(space[s]) for s in layer.inputs)
                if a != b:
                    # keep the model input as root so it is never resized
                    if b == INPUT:
                        a, b = b, a
                    parent[b] = a
                space[layer.name] = a
            else:
                space[layer.name] = space[layer.inputs[0]]
        return {name: find(s) for name, s in space.items()}

    # -- parameters -----------------------------------------------------------

    def init_params(self, rng: np.random.Generator) -> ModelGraph:
        self.params.clear()
        self.buffers.clear()
        for layer in self.layers:
            n = layer.name
            if layer.kind == "conv":
                k = layer.kernel_size
                shape = (layer.out_channels, layer.in_channels, k, k)
                self.params[f"{n}.weight"] = Parameter(kaiming(rng, shape, layer.in_channels * k * k), name=f"{n}.weight")
                if layer.bias:
                    self.params[f"{n}.bias"] = Parameter(np.zeros(layer.out_channels), name=f"{n}.bias")
            elif layer.kind == "batchnorm":
                c = self._channels_into(layer)
                self.params[f"{n}.gamma"] = Parameter(np.ones(c), name=f"{n}.gamma")
                self.params[f"{n}.beta"] = Parameter(np.zeros(c), name=f"{n}.beta")
                self.buffers[f"{n}.running_mean"] = np.zeros(c)
                self.buffers[f"{n}.running_var"] = np.ones(c)
            elif layer.kind == "linear":
                bound = 1.0 / np.sqrt(layer.in_channels)
                self.params[f"{n}.weight"] = Parameter(
                    rng.uniform(-bound, bound, size=(layer.out_channels, layer.in_channels)), name=f"{n}.weight")
                self.params[f"{n}.bias"] = Parameter(np.zeros(layer.out_channels), name=f"{n}.bias")
        return self

    def _channels_into(self, layer: LayerSpec) -> int:
        return self.infer_shapes()[layer.inputs[0]][0]

    def param(self, name: str) -> Parameter:
        return self.params[name]

    def trainable(self) -> list[Parameter]:
        return [p for p in self.params.values() if p.trainable]

    def copy(self) -> ModelGraph:
        return copy.deepcopy(self)

    def describe(self) -> dict:
        return {
            "arch": self.arch,
            "input_channels": self.input_channels,
            "input_resolution": self.input_resolution,
            "num_classes": self.num_classes,
            "layers": [layer.to_json() for layer in self.layers],
        }

    @classmethod
    def from_description(cls, desc: dict) -> ModelGraph:
        return cls([LayerSpec.from_json(d) for d in desc["layers"]],
                   input_channels=desc.get("input_channels", 3),
                   input_resolution=desc.get("input_resolution", 32),
                   num_classes=desc.get("num_classes", 10),
                   arch=desc.get("arch", "custom"))

    def conv_widths(self) -> list[int]:
        return [layer.out_channels for layer in self.conv_layers()]

    def __repr__(self) -> str:
        return f"ModelGraph(arch={self.arch!r}, convs={self.conv_widths()})"


# -- accounting -------------------------------------------------------------


def param_count(model: ModelGraph) -> int:
    """Conv weights plus linear weights and biases; BN parameters excluded."""
    total = 0
    for layer in model.layers:
        if layer.kind == "conv":
            total += layer.in_channels * layer.out_channels * layer.kernel_size ** 2
        elif layer.kind == "linear":
            total += layer.in_channels * layer.out_channels + layer.out_channels
    return total


# -- BN folding ---------------------------------------------------------------


def fold_bn_arrays(weight, bias, gamma, beta, mean, var, eps: float = BN_EPS):
    """Return (W', b') with W' = W*gamma/sqrt(var+eps), b' = beta - gamma*mean/sqrt(var+eps) (+ bias*scale).

    Works on numpy arrays and on engine tensors alike; the same expression is
    used by the QAT forward and the integer export so both agree bit-for-bit.
    """
    scale = gamma / np.sqrt(var + eps)
    w = weight * scale.reshape(-1, 1, 1, 1)
    b = beta - mean * scale
    if bias is not None:
        b = b + bias * scale
    return w, b


def fold_bn(model: ModelGraph) -> ModelGraph:
    """Absorb each conv's successor BN into the conv; idempotent."""
    out = model.copy()
    removed = {}
    for conv in out.conv_layers():
        bn = out.bn_after(conv)
        if bn is None:
            continue
        p, b = out.params, out.buffers
        w, bias = fold_bn_arrays(
            p[f"{conv.name}.weight"].data,
            p[f"{conv.name}.bias"].data if conv.bias else None,
            p[f"{bn.name}.gamma"].data, p[f"{bn.name}.beta"].data,
            b[f"{bn.name}.running_mean"], b[f"{bn.name}.running_var"],
        )
        p[f"{conv.name}.weight"] = Parameter(w, name=f"{conv.name}.weight")
        p[f"{conv.name}.bias"] = Parameter(bias, name=f"{conv.name}.bias")
        conv.bias = True
        for key in ("gamma", "beta"):
            del p[f"{bn.name}.{key}"]
        for key in ("running_mean", "running_var"):
            del b[f"{bn.name}.{key}"]
        removed[bn.name] = conv.name
    out.layers = [layer for layer in out.layers if layer.name not in removed]
    for layer in out.layers:
        layer.inputs = [removed.get(s, s) for s in layer.inputs]
    out.validate()
    return out


# -- builders -----------------------------------------------------------------


def _conv_bn_relu(layers: list, name: str, cin: int, cout: int, k: int = 3, stride: int = 1,
                  inputs=None, relu: bool = True) -> str:
    layers.append(LayerSpec(f"{name}", "conv", list(inputs or []), cin, cout, k, stride))
    layers.append(LayerSpec(f"{name}_bn", "batchnorm", [name]))
    last = f"{name}_bn"
    if relu:
        layers.append(LayerSpec(f"{name}_relu", "relu", [last]))
        last = f"{name}_relu"
    return last


def toy_cnn(num_classes: int = 2, input_channels: int = 3, input_resolution: int = 16,
            widths=(16, 32, 64, 64)) -> ModelGraph:
    """Four 3x3 conv blocks, maxpools after the first two, global average pool, linear head."""
    layers: list[LayerSpec] = []
    c = input_channels
    last = None
    for i, w in enumerate(widths):
        last = _conv_bn_relu(layers, f"conv{i + 1}", c, w, inputs=[last] if last else None)
        c = w
        if i < 2:
            layers.append(LayerSpec(f"pool{i + 1}", "maxpool", [last], kernel_size=2, stride=2))
            last = f"pool{i + 1}"
    layers.append(LayerSpec("gap", "avgpool", [last], kernel_size=0))
    layers.append(LayerSpec("fc", "linear", ["gap"], in_channels=c, out_channels=num_classes))
    return ModelGraph(layers, input_channels, input_resolution, num_classes, arch="toy-cnn")


def vgg(config, num_classes: int = 10, input_channels: int = 3, input_resolution: int = 32,
        arch: str = "vgg") -> ModelGraph:
    """VGG-style stack; ``config`` lists conv widths with ``"M"`` for a 2x2 maxpool."""
    layers: list[LayerSpec] = []
    c = input_channels
    last = None
    conv_i = pool_i = 0
    for item in config:
        if item == "M":
            pool_i += 1
            layers.append(LayerSpec(f"pool{pool_i}", "maxpool", [last] if last else [], kernel_size=2, stride=2))
            last = f"pool{pool_i}"
        else:
            conv_i += 1
            last = _conv_bn_relu(layers, f"conv{conv_i}", c, int(item), inputs=[last] if last else None)
            c = int(item)
    layers.append(LayerSpec("gap", "avgpool", [last], kernel_size=0))
    layers.append(LayerSpec("fc", "linear", ["gap"], in_channels=c, out_channels=num_classes))
    return ModelGraph(layers, input_channels, input_resolution, num_classes, arch=arch)


# Illustrative widths only: the published baselines do not list their exact channel counts.
VGG9_WIDTHS = (64, "M", 128, "M", 256, 256, "M", 512, 512, "M", 512, 512)
VGG16_WIDTHS = (64, 64, "M", 128, 128, "M", 256, 256, 256, "M", 512, 512, 512, "M", 512, 512, 512)


def vgg9(widths=VGG9_WIDTHS, **kw) -> ModelGraph:
    return vgg(widths, arch="vgg9", **kw)


def vgg16(widths=VGG16_WIDTHS, **kw) -> ModelGraph:
    return vgg(widths, arch="vgg16", **kw)


def resnet18(widths=(64, 128, 256, 512), blocks=(2, 2, 2, 2), num_classes: int = 10,
             input_channels: int = 3, input_resolution: int = 32) -> ModelGraph:
    """CIFAR-style ResNet with basic blocks and 1x1 projection shortcuts."""
    layers: list[LayerSpec] = []
    last = _conv_bn_relu(layers, "stem", input_channels, widths[0])
    c = widths[0]
    for stage, (w, n) in enumerate(zip(widths, blocks), start=1):
        for b in range(n):
            stride = 2 if (b == 0 and stage > 1) else 1
            pre = f"s{stage}b{b + 1}"
            h = _conv_bn_relu(layers, f"{pre}_conv1", c, w, stride=stride, inputs=[last])
            h = _conv_bn_relu(layers, f"{pre}_conv2", w, w, inputs=[h], relu=False)
            if stride != 1 or c != w:
                short = _conv_bn_relu(layers, f"{pre}_short", c, w, k=1, stride=stride, inputs=[last], relu=False)
            else:
                short = last
            layers.append(LayerSpec(f"{pre}_add", "residual-add", [h, short]))
            layers.append(LayerSpec(f"{pre}_relu", "relu", [f"{pre}_add"]))
            last = f"{pre}_relu"
            c = w
    layers.append(LayerSpec("gap", "avgpool", [last], kernel_size=0))
    layers.append(LayerSpec("fc", "linear", ["gap"], in_channels=c, out_channels=num_classes))
    return ModelGraph(layers, input_channels, input_resolution, num_classes, arch="resnet18")


def build(arch: str, rng: np.random.Generator | None = None, **kw) -> ModelGraph:
    builders = {"toy-cnn": toy_cnn, "vgg9": vgg9, "vgg16": vgg16, "resnet18": resnet18}
    if arch not in builders:
        raise GraphError(f"unknown architecture {arch!r}; choose from {sorted(builders)}")
    model = builders[arch](**kw)
    if rng is not None:
        model.init_params(rng)
    return model
