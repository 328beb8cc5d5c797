"""CIM-aware width morphing: shrink with a BN-gamma regularizer, prune, then
grow every layer by one common ratio until the bitline budget is met."""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .config import MacroConfig, channels_per_bitline, round_half_away
from .data import Dataset
from .engine import Parameter, Tensor
from .checkpoint import save_checkpoint
from .mapper import build_plan, macro_usage
from .model import INPUT, ModelGraph, kaiming, param_count
from .training import evaluate, train

log = logging.getLogger(__name__)


class MorphError(ValueError):
    pass


@dataclass
class MorphConfig:
    target_bl: int
    lambda_max: float = 5e-8
    ramp_epochs: int = 100
    shrink_epochs: int = 150
    shrink_lr: float = 0.05
    finetune_epochs: int = 300
    finetune_lr: float = 0.01
    tau: float = 1e-2
    ratio_step: float = 1e-3
    iterations: int = 3
    max_ratio: float = 64.0
    finetune_each_iteration: bool = True
    batch_size: int = 64

    def validate(self, model: ModelGraph | None = None) -> None:
        if self.lambda_max < 0:
            raise MorphError("lambda_max must be >= 0")
        if self.tau <= 0:
            raise MorphError("tau must be > 0")
        if self.ratio_step <= 0:
            raise MorphError("ratio_step must be > 0")
        if self.iterations < 0:
            raise MorphError("iterations must be >= 0")
        if model is not None:
            floor = len(model.conv_layers())
            if self.target_bl < floor:
                raise MorphError(f"target_bl {self.target_bl} below the minimum mappable width {floor}")


# -- channel spaces -----------------------------------------------------------


def group_bns(model: ModelGraph) -> dict[str, list[str]]:
    """BN layers whose gammas gate each channel space."""
    groups = model.channel_groups()
    out: dict[str, list[str]] = {}
    for layer in model.layers:
        if layer.kind == "batchnorm":
            out.setdefault(groups[layer.inputs[0]], []).append(layer.name)
    return out


def group_width(model: ModelGraph, group: str) -> int:
    if group == INPUT:
        return model.input_channels
    return model.layer(group).out_channels


def _abs_gammas(model: ModelGraph, bns: list[str]) -> np.ndarray:
    return np.stack([np.abs(model.params[f"{b}.gamma"].data) for b in bns])


def alive_mask(model: ModelGraph, bns: list[str], tau: float) -> np.ndarray:
    return (_abs_gammas(model, bns) > tau).any(axis=0)


# -- regularizer --------------------------------------------------------------


def gamma_counts(model: ModelGraph, tau: float) -> dict[str, int]:
    """Alive-channel count per channel space (constants for one epoch)."""
    counts = {INPUT: model.input_channels}
    for g, bns in group_bns(model).items():
        counts[g] = int(alive_mask(model, bns, tau).sum())
    return counts


def regularizer_F(model: ModelGraph, tau: float, counts: dict[str, int] | None = None) -> Tensor:
    """Parameter-count penalty over BN gammas, summed over conv layers.

    For conv L with kernel x*y, output gammas g_L and input gammas g_{L-1}:
    ``x*y*(A_L*sum|g_L| + B_L*sum|g_{L-1}|)`` where A_L counts alive input
    channels and B_L alive output channels.  Counts are held constant.
    """
    counts = counts if counts is not None else gamma_counts(model, tau)
    groups = model.channel_groups()
    bns = group_bns(model)
    p = model.params
    total = Tensor(0.0)
    for conv in model.conv_layers():
        own_bn = model.bn_after(conv)
        if own_bn is None:
            raise MorphError(f"regularizer: conv {conv.name!r} has no batchnorm successor")
        kk = conv.kernel_size ** 2
        out_g, in_g = groups[conv.name], groups[conv.inputs[0]]
        own = p[f"{own_bn.name}.gamma"].abs().sum()
        total = total + (kk * counts[in_g]) * own
        if in_g != INPUT:
            prev = None
            for b in bns.get(in_g, []):
                s = p[f"{b}.gamma"].abs().sum()
                prev = s if prev is None else prev + s
            if prev is not None:
                total = total + (kk * counts[out_g]) * prev
    return total


def lambda_at(epoch: int, cfg: MorphConfig) -> float:
    if cfg.ramp_epochs <= 0:
        return cfg.lambda_max
    return cfg.lambda_max * min(1.0, epoch / cfg.ramp_epochs)


def shrink_train(model: ModelGraph, cfg: MorphConfig, data: Dataset, macro: MacroConfig,
                 rng: np.random.Generator, epochs: int | None = None) -> list[float]:
    """Train with CE + lambda(t)*F; lambda ramps linearly from 0 then holds."""

    def penalty(epoch):
        lam = lambda_at(epoch, cfg)
        if lam == 0.0:
            return None
        counts = gamma_counts(model, cfg.tau)
        return lambda: regularizer_F(model, cfg.tau, counts) * lam

    n = cfg.shrink_epochs if epochs is None else epochs
    # DAC steps belong to the seed model; the shrink learning rate can drive them negative
    held = [p for name, p in model.params.items() if name.endswith(".act_step") and p.trainable]
    for p in held:
        p.freeze()
    try:
        return train(model, macro, data, n, cfg.shrink_lr, rng, batch_size=cfg.batch_size, penalty=penalty)
    finally:
        for p in held:
            p.unfreeze()


# -- resizing -----------------------------------------------------------------


def _reindex(model: ModelGraph, index: dict[str, np.ndarray], rng: np.random.Generator | None) -> ModelGraph:
    """Rebuild ``model`` with channel spaces re-indexed.

    ``index[g][j]`` is the source channel for new channel j of space g, or -1
    for a fresh channel.  Fresh filters get Kaiming fan-in weights; weights
    linking retained filters to fresh inputs start at zero so the retained
    function is unchanged; fresh BN channels start as identity.
    """
    groups = model.channel_groups()
    old_shapes = model.infer_shapes()
    out = model.copy()
    p, buf = out.params, out.buffers

    def idx_for(tensor_name: str, width: int) -> np.ndarray:
        return index.get(groups[tensor_name], np.arange(width))

    for layer in out.layers:
        n = layer.name
        if layer.kind == "conv":
            oi = idx_for(n, layer.out_channels)
            ii = idx_for(layer.inputs[0], layer.in_channels)
            w_old = p[f"{n}.weight"].data
            k = layer.kernel_size
            w = np.zeros((len(oi), len(ii), k, k))
            keep_o, keep_i = oi >= 0, ii >= 0
            w[np.ix_(keep_o, keep_i)] = w_old[np.ix_(oi[keep_o], ii[keep_i])]
            fresh = ~keep_o
            if fresh.any():
                if rng is None:
                    raise MorphError("expansion needs an rng for fresh filters")
                w[fresh] = kaiming(rng, (int(fresh.sum()), len(ii), k, k), len(ii) * k * k)
            _set(p, f"{n}.weight", w)
            if f"{n}.bias" in p:
                _set(p, f"{n}.bias", _take(p[f"{n}.bias"].data, oi, 0.0))
            layer.in_channels, layer.out_channels = len(ii), len(oi)
        elif layer.kind == "batchnorm":
            ci = idx_for(layer.inputs[0], len(p[f"{n}.gamma"].data))
            _set(p, f"{n}.gamma", _take(p[f"{n}.gamma"].data, ci, 1.0))
            _set(p, f"{n}.beta", _take(p[f"{n}.beta"].data, ci, 0.0))
            buf[f"{n}.running_mean"] = _take(buf[f"{n}.running_mean"], ci, 0.0)
            buf[f"{n}.running_var"] = _take(buf[f"{n}.running_var"], ci, 1.0)
        elif layer.kind == "linear":
            src_shape = old_shapes[layer.inputs[0]]
            c_old = src_shape[0]
            spatial = int(np.prod(src_shape[1:]))
            ci = idx_for(layer.inputs[0], c_old)
            w_old = p[f"{n}.weight"].data.reshape(layer.out_channels, c_old, spatial)
            w = np.zeros((layer.out_channels, len(ci), spatial))
            w[:, ci >= 0] = w_old[:, ci[ci >= 0]]
            _set(p, f"{n}.weight", w.reshape(layer.out_channels, -1))
            layer.in_channels = len(ci) * spatial
    out.validate()
    return out


def _take(a: np.ndarray, idx: np.ndarray, fill: float) -> np.ndarray:
    res = np.full(len(idx), fill)
    res[idx >= 0] = a[idx[idx >= 0]]
    return res


def _set(params: dict, name: str, value: np.ndarray) -> None:
    old = params[name]
    params[name] = Parameter(value, trainable=old.trainable, name=name)


def prune_zero_gamma(model: ModelGraph, tau: float) -> ModelGraph:
    """Drop channels whose |gamma| <= tau in every BN of their channel space."""
    index = {}
    for g, bns in group_bns(model).items():
        if g == INPUT:
            continue
        keep = alive_mask(model, bns, tau)
        if not keep.any():
            best = int(_abs_gammas(model, bns).max(axis=0).argmax())
            warnings.warn(f"all channels of {g!r} fall below tau={tau}; keeping channel {best}", stacklevel=2)
            keep[best] = True
        if not keep.all():
            index[g] = np.flatnonzero(keep)
    if not index:
        return model.copy()
    return _reindex(model, index, None)


def scale_channels(c: int, ratio: float) -> int:
    """round(c * ratio), ties away from zero (product snapped to 1e-9 first)."""
    return int(round_half_away(round(c * ratio, 9)))


def expand_model(model: ModelGraph, ratio: float, rng: np.random.Generator) -> ModelGraph:
    """Scale every channel space except the image input to round(C * ratio)."""
    if ratio < 1:
        raise MorphError(f"expansion ratio must be >= 1, got {ratio}")
    index = {}
    groups = set(model.channel_groups().values()) - {INPUT}
    for g in sorted(groups):
        if model.layer(g).kind != "conv":
            continue
        c = group_width(model, g)
        new = max(scale_channels(c, ratio), c)
        if new != c:
            index[g] = np.concatenate([np.arange(c), -np.ones(new - c, dtype=np.int64)])
    if not index:
        return model.copy()
    return _reindex(model, index, rng)


# -- expansion search -----------------------------------------------------------


def closed_form_bitlines(channels, kernel_sizes, macro: MacroConfig, ratio: float = 1.0,
                         in_channels: int = 3) -> int:
    """Columns used by a plain conv chain whose output widths are scaled by ``ratio``."""
    total = 0
    c_in = in_channels
    for c, k in zip(channels, kernel_sizes):
        c_out = scale_channels(c, ratio)
        total += math.ceil(c_in / channels_per_bitline(macro, k)) * c_out
        c_in = c_out
    return total


def graph_bitlines(model: ModelGraph, macro: MacroConfig, ratio: float = 1.0) -> int:
    """Columns used after scaling every channel space of ``model`` by ``ratio``."""
    groups = model.channel_groups()

    def width(g):
        return model.input_channels if g == INPUT else scale_channels(group_width(model, g), ratio)

    total = 0
    for conv in model.conv_layers():
        cin = width(groups[conv.inputs[0]])
        total += math.ceil(cin / channels_per_bitline(macro, conv.kernel_size)) * width(groups[conv.name])
    return total


def search_ratio(cost, target_bl: int, step: float = 1e-3, max_ratio: float = 64.0) -> float:
    """Largest grid ratio 1 + i*step (<= max_ratio) with cost(ratio) <= target_bl."""
    if cost(1.0) > target_bl:
        warnings.warn("no expansion headroom: budget already exceeded at ratio 1", stacklevel=2)
        return 1.0
    best = 1.0
    i = 1
    while True:
        r = round(1.0 + i * step, 10)
        if r > max_ratio:
            warnings.warn(f"expansion ratio capped at {best}", stacklevel=2)
            return best
        if cost(r) > target_bl:
            return best
        best = r
        i += 1


def find_expansion_ratio(channel_vector, kernel_sizes, macro: MacroConfig, target_bl: int,
                         step: float = 1e-3, in_channels: int = 3, max_ratio: float = 64.0) -> float:
    channel_vector, kernel_sizes = list(channel_vector), list(kernel_sizes)
    if len(channel_vector) != len(kernel_sizes):
        raise MorphError("channel_vector and kernel_sizes differ in length")
    return search_ratio(
        lambda r: closed_form_bitlines(channel_vector, kernel_sizes, macro, r, in_channels),
        target_bl, step, max_ratio,
    )


# -- iteration ------------------------------------------------------------------


@dataclass
class MorphReport:
    target_bl: int
    seed: dict = field(default_factory=dict)
    iterations: list[dict] = field(default_factory=list)

    def to_json(self) -> dict:
        return asdict(self)


def model_summary(model: ModelGraph, macro: MacroConfig, target_bl: int | None = None) -> dict:
    plan = build_plan(model, macro)
    used = plan.used_bls
    return {
        "params": param_count(model),
        "used_bls": used,
        "macro_usage": macro_usage(plan, target_bl) if target_bl and used <= target_bl else None,
        "widths": model.conv_widths(),
    }


def morph_iterate(model: ModelGraph, cfg: MorphConfig, train_data: Dataset, test_data: Dataset,
                  macro: MacroConfig, rng: np.random.Generator, checkpoint_dir=None):
    """Shrink, prune, expand and fine-tune ``cfg.iterations`` times."""
    cfg.validate(model)
    report = MorphReport(cfg.target_bl)
    report.seed = model_summary(model, macro) | {"accuracy": evaluate(model, macro, test_data)}
    model = model.copy()
    for name, p in model.params.items():
        if name.endswith(".act_step"):  # DAC steps belong to the seed model
            p.freeze()
    for it in range(cfg.iterations):
        shrink_train(model, cfg, train_data, macro, rng)
        zeros = sum(int((np.abs(model.params[f"{b}.gamma"].data) <= cfg.tau).sum())
                    for bns in group_bns(model).values() for b in bns)
        pruned = prune_zero_gamma(model, cfg.tau)
        pruned_summary = model_summary(pruned, macro)
        ratio = search_ratio(lambda r: graph_bitlines(pruned, macro, r), cfg.target_bl, cfg.ratio_step, cfg.max_ratio)
        model = expand_model(pruned, ratio, rng)
        last = it == cfg.iterations - 1
        if cfg.finetune_each_iteration or last:
            train(model, macro, train_data, cfg.finetune_epochs, cfg.finetune_lr, rng, batch_size=cfg.batch_size)
        entry = {
            "iteration": it + 1,
            "gammas_below_tau": zeros,
            "pruned": pruned_summary,
            "ratio": ratio,
            **model_summary(model, macro, cfg.target_bl),
            "accuracy": evaluate(model, macro, test_data),
        }
        report.iterations.append(entry)
        log.info("morph iteration %d: ratio %.3f, used_bls %d, accuracy %.2f",
                 it + 1, ratio, entry["used_bls"], entry["accuracy"])
        if checkpoint_dir is not None:
            save_checkpoint(model, Path(checkpoint_dir) / f"morph_iter{it + 1}.ckpt")
    return model, report
