import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cimadapt.config import MacroConfig
from cimadapt.data import synthetic_dataset, train_test_split
from cimadapt.engine import Parameter
from cimadapt.mapper import used_bitlines
from cimadapt.model import LayerSpec, ModelGraph, resnet18, toy_cnn
from cimadapt.morphing import (
    MorphConfig,
    MorphError,
    closed_form_bitlines,
    expand_model,
    find_expansion_ratio,
    graph_bitlines,
    group_bns,
    lambda_at,
    morph_iterate,
    prune_zero_gamma,
    regularizer_F,
    scale_channels,
    shrink_train,
)
from cimadapt.network import predict
from cimadapt.training import train, train_seed


def bn_chain(widths, k=3, res=6):
    layers, c = [], widths[0]
    for i, w in enumerate(widths[1:]):
        layers += [LayerSpec(f"c{i}", "conv", [], c, w, k), LayerSpec(f"b{i}", "batchnorm"),
                   LayerSpec(f"r{i}", "relu")]
        c = w
    layers += [LayerSpec("gap", "avgpool", kernel_size=0), LayerSpec("fc", "linear", in_channels=c, out_channels=3)]
    return ModelGraph(layers, widths[0], res)


def set_gamma(model, bn, values):
    model.params[f"{bn}.gamma"] = Parameter(np.asarray(values, dtype=float), name=f"{bn}.gamma")


def randomize_bn(model, rng):
    for bns in group_bns(model).values():
        for b in bns:
            c = len(model.params[f"{b}.gamma"].data)
            model.params[f"{b}.gamma"] = Parameter(rng.uniform(0.5, 2.0, c), name=f"{b}.gamma")
            model.params[f"{b}.beta"] = Parameter(rng.standard_normal(c), name=f"{b}.beta")
            model.buffers[f"{b}.running_mean"] = rng.standard_normal(c)
            model.buffers[f"{b}.running_var"] = rng.uniform(0.5, 2.0, c)


def mask_channels(model, bns, dead):
    """Silence channels exactly: gamma = beta = 0 makes the BN output zero."""
    for b in bns:
        for name in (f"{b}.gamma", f"{b}.beta"):
            v = model.params[name].data.copy()
            v[dead] = 0.0
            model.params[name] = Parameter(v, name=name)


def brute_grid_ratio(channels, kernels, macro, target, step=1e-3, cap=64.0, in_channels=3):
    """Scan the whole grid from the cap downwards, recomputing widths independently."""
    def cost(r):
        total, cin = 0, in_channels
        for c, k in zip(channels, kernels):
            cout = math.floor(c * r + 0.5 + 1e-9)
            total += -(-cin // (macro.wordlines // (k * k))) * cout
            cin = cout
        return total

    if cost(1.0) > target:
        return 1.0
    n = int(round((cap - 1.0) / step))
    ok = 0
    for i in range(n + 1):
        if cost(1.0 + i * step) > target:
            break
        ok = i
    return round(1.0 + ok * step, 10)


# -- regularizer --------------------------------------------------------------


def test_regularizer_hand_example():
    m = bn_chain([1, 1, 1]).init_params(np.random.default_rng(0))
    set_gamma(m, "b0", [1.0])
    set_gamma(m, "b1", [2.0])
    # conv c1: k=3, own gamma 2, previous gamma 1, one alive channel each side
    own_c0 = 9 * 1 * 1.0
    c1 = 9 * (1 * 2.0 + 1 * 1.0)
    assert float(regularizer_F(m, 0.01).data) == pytest.approx(own_c0 + c1)
    assert c1 == 27


def test_regularizer_zero_and_homogeneous(rng):
    m = toy_cnn().init_params(rng)
    randomize_bn(m, rng)
    f1 = float(regularizer_F(m, 0.01).data)
    for bns in group_bns(m).values():
        for b in bns:
            set_gamma(m, b, 2.0 * m.params[f"{b}.gamma"].data)
    assert float(regularizer_F(m, 0.01).data) == pytest.approx(2.0 * f1, rel=1e-12)
    for bns in group_bns(m).values():
        for b in bns:
            set_gamma(m, b, np.zeros_like(m.params[f"{b}.gamma"].data))
    assert float(regularizer_F(m, 0.01).data) == 0.0


def test_regularizer_needs_bn():
    m = ModelGraph([LayerSpec("c", "conv", [], 3, 4, 3)], 3, 4).init_params(np.random.default_rng(0))
    with pytest.raises(MorphError, match="batchnorm"):
        regularizer_F(m, 0.01)


def test_regularizer_gradient_is_sign_times_counts():
    m = bn_chain([3, 2, 2]).init_params(np.random.default_rng(0))
    set_gamma(m, "b0", [0.5, -0.5])
    set_gamma(m, "b1", [1.0, 0.0])
    regularizer_F(m, 0.01).backward()
    # b0: own term of c0 (3 input channels) + previous term of c1 (1 alive output)
    np.testing.assert_allclose(m.params["b0.gamma"].grad, 9 * np.array([3 + 1, -(3 + 1)]))
    np.testing.assert_allclose(m.params["b1.gamma"].grad[0], 9 * 2)


def test_shrink_without_lambda_is_plain_training(rng):
    data = synthetic_dataset(per_class=20, resolution=8)
    m = toy_cnn(input_resolution=8).init_params(rng)
    a, b = m.copy(), m.copy()
    cfg = MorphConfig(target_bl=368, lambda_max=0.0)
    h1 = shrink_train(a, cfg, data, MacroConfig(), np.random.default_rng(5), epochs=2)
    h2 = train(b, MacroConfig(), data, 2, cfg.shrink_lr, np.random.default_rng(5), batch_size=cfg.batch_size)
    assert h1 == h2
    for k in a.params:
        assert a.params[k].data.tobytes() == b.params[k].data.tobytes()


def test_lambda_ramp():
    cfg = MorphConfig(target_bl=10, lambda_max=1e-6, ramp_epochs=4)
    assert [lambda_at(e, cfg) for e in (0, 2, 4, 9)] == [0.0, 5e-7, 1e-6, 1e-6]
    assert lambda_at(0, MorphConfig(target_bl=10, ramp_epochs=0)) == 5e-8


def test_shrink_train_sparsifies_gammas():
    # regression fixture: seed 0, 200 images, 5 seed epochs, 30 shrink epochs
    rng = np.random.default_rng(0)
    data = synthetic_dataset(per_class=100, seed=0)
    m = toy_cnn().init_params(rng)
    train_seed(m, MacroConfig(), data, 5, 0.01, rng)
    cfg = MorphConfig(target_bl=184, lambda_max=1e-5, ramp_epochs=10, shrink_lr=0.05)
    steps = [m.params[n].data.copy() for n in m.params if n.endswith(".act_step")]

    def gammas():
        return np.concatenate([np.abs(m.params[f"{b}.gamma"].data) for bns in group_bns(m).values() for b in bns])

    before = (gammas() <= cfg.tau).mean()
    shrink_train(m, cfg, data, MacroConfig(), rng, epochs=30)
    after = (gammas() <= cfg.tau).mean()
    assert after > before and after >= 0.2
    # DAC steps stay fixed during shrinking, and trainable afterwards
    held = [m.params[n] for n in m.params if n.endswith(".act_step")]
    assert all(a.tobytes() == p.data.tobytes() for a, p in zip(steps, held))
    assert all(p.trainable for p in held)


def test_morph_config_validation():
    with pytest.raises(MorphError):
        MorphConfig(target_bl=10, lambda_max=-1).validate()
    with pytest.raises(MorphError):
        MorphConfig(target_bl=10, tau=0).validate()
    with pytest.raises(MorphError):
        MorphConfig(target_bl=10, ratio_step=0).validate()
    with pytest.raises(MorphError, match="minimum mappable"):
        MorphConfig(target_bl=3).validate(toy_cnn())


# -- pruning ------------------------------------------------------------------


def test_prune_identity_when_nothing_below_tau(rng):
    m = toy_cnn().init_params(rng)
    p = prune_zero_gamma(m, 0.01)
    assert p.conv_widths() == m.conv_widths()


def test_prune_mask_semantics(rng):
    m = bn_chain([3, 4, 5]).init_params(rng)
    set_gamma(m, "b0", [0, 1, 0, 1])
    p = prune_zero_gamma(m, 1e-2)
    assert p.layer("c0").out_channels == 2 and p.layer("c1").in_channels == 2
    assert used_bitlines(p, MacroConfig()) < used_bitlines(m, MacroConfig())


def test_prune_matches_masked_forward(rng):
    m = toy_cnn().init_params(rng)
    randomize_bn(m, rng)
    for bns in group_bns(m).values():
        dead = rng.random(len(m.params[f"{bns[0]}.gamma"].data)) < 0.4
        dead[0] = False
        mask_channels(m, bns, dead)
    x = rng.standard_normal((4, 3, 16, 16))
    ref = predict(m, x, MacroConfig())
    p = prune_zero_gamma(m, 1e-2)
    assert sum(p.conv_widths()) < sum(m.conv_widths())
    np.testing.assert_allclose(predict(p, x, MacroConfig()), ref, atol=1e-6)


def test_prune_residual_union_mask(rng):
    m = resnet18(widths=(4, 6, 6, 8), blocks=(1, 1, 1, 1), input_resolution=8).init_params(rng)
    randomize_bn(m, rng)
    groups = group_bns(m)
    shared = [g for g, bns in groups.items() if len(bns) > 1][0]
    bns = groups[shared]
    # channel 1 dead in one operand only -> kept; channel 2 dead in all -> removed
    mask_channels(m, bns[:1], np.array([False, True, False, False]))
    mask_channels(m, bns, np.array([False, False, True, False]))
    x = rng.standard_normal((2, 3, 8, 8))
    ref = predict(m, x, MacroConfig())
    p = prune_zero_gamma(m, 1e-2)
    assert p.layer(shared).out_channels == 3
    np.testing.assert_allclose(predict(p, x, MacroConfig()), ref, atol=1e-6)


def test_prune_keeps_one_channel_and_warns(rng):
    m = bn_chain([3, 3, 2]).init_params(rng)
    set_gamma(m, "b0", [0.001, -0.005, 0.002])
    with pytest.warns(UserWarning, match="below tau"):
        p = prune_zero_gamma(m, 1e-2)
    assert p.layer("c0").out_channels == 1
    np.testing.assert_allclose(p.params["b0.gamma"].data, [-0.005])


# -- expansion ----------------------------------------------------------------


def test_scale_channels_rounding():
    assert scale_channels(16, 1.0) == 16
    assert scale_channels(10, 1.05) == 11  # 10.5 rounds away from zero
    assert scale_channels(12, 1.125) == 14  # 13.5
    assert scale_channels(3, 1.5) == 5


def test_expand_model_widths(rng):
    m = bn_chain([3, 16, 32]).init_params(rng)
    assert expand_model(m, 1.0, rng).conv_widths() == [16, 32]
    e = expand_model(m, 2.0, rng)
    assert e.conv_widths() == [32, 64]
    assert e.layer("fc").in_channels == 64 and e.layer("c0").in_channels == 3
    with pytest.raises(MorphError):
        expand_model(m, 0.5, rng)


def test_expansion_keeps_retained_channels(rng):
    layers = [LayerSpec("c0", "conv", [], 3, 4, 3), LayerSpec("b0", "batchnorm"), LayerSpec("r0", "relu"),
              LayerSpec("c1", "conv", [], 4, 5, 3), LayerSpec("b1", "batchnorm")]
    m = ModelGraph(layers, 3, 6).init_params(rng)
    randomize_bn(m, rng)
    e = expand_model(m, 1.5, rng)
    assert e.conv_widths() == [6, 8]
    x = rng.standard_normal((2, 3, 6, 6))
    np.testing.assert_allclose(predict(e, x, MacroConfig())[:, :5], predict(m, x, MacroConfig()), atol=1e-12)


def test_closed_form_matches_mapper_on_chains():
    macro = MacroConfig()
    rng = np.random.default_rng(7)
    for _ in range(20):
        n = int(rng.integers(1, 6))
        widths = [int(v) for v in rng.integers(1, 120, n)]
        ks = [int(v) for v in rng.choice([1, 3, 5], n)]
        layers, c = [], 3
        for i, (w, k) in enumerate(zip(widths, ks)):
            layers.append(LayerSpec(f"c{i}", "conv", [], c, w, k))
            c = w
        g = ModelGraph(layers, 3, 8)
        assert closed_form_bitlines(widths, ks, macro) == used_bitlines(g, macro)


def test_find_expansion_ratio_boundaries():
    macro = MacroConfig()
    ch, ks = [12, 24, 48, 48], [3] * 4
    used = closed_form_bitlines(ch, ks, macro)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        r = find_expansion_ratio(ch, ks, macro, used)
    assert closed_form_bitlines(ch, ks, macro, r) <= used
    assert r == 1.0 or closed_form_bitlines(ch, ks, macro, r + 1e-3) > used
    with pytest.warns(UserWarning, match="no expansion headroom"):
        assert find_expansion_ratio(ch, ks, macro, used - 1) == 1.0
    with pytest.warns(UserWarning, match="capped"):
        assert find_expansion_ratio(ch, ks, macro, 10 ** 9) == 64.0
    with pytest.raises(MorphError):
        find_expansion_ratio([1, 2], [3], macro, 100)


def test_find_expansion_ratio_toy_pruned_vs_grid():
    macro = MacroConfig()
    ch, ks = [12, 24, 48, 48], [3] * 4
    r = find_expansion_ratio(ch, ks, macro, 1024)
    assert r == brute_grid_ratio(ch, ks, macro, 1024)
    widths = [scale_channels(c, r) for c in ch]
    layers, c = [], 3
    for i, w in enumerate(widths):
        layers.append(LayerSpec(f"c{i}", "conv", [], c, w, 3))
        c = w
    assert used_bitlines(ModelGraph(layers, 3, 8), macro) <= 1024


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.integers(1, 64), st.sampled_from([1, 3])), min_size=1, max_size=5),
       st.integers(0, 3000))
def test_find_expansion_ratio_property(layers, target):
    macro = MacroConfig()
    ch, ks = [c for c, _ in layers], [k for _, k in layers]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        r = find_expansion_ratio(ch, ks, macro, target)
    assert r == brute_grid_ratio(ch, ks, macro, target)
    if closed_form_bitlines(ch, ks, macro) <= target:
        assert closed_form_bitlines(ch, ks, macro, r) <= target


def test_graph_bitlines_agrees_after_expansion(rng):
    macro = MacroConfig()
    m = resnet18(widths=(8, 12, 16, 20), blocks=(1, 1, 1, 1), input_resolution=8).init_params(rng)
    for r in (1.0, 1.3, 2.0):
        assert graph_bitlines(m, macro, r) == used_bitlines(expand_model(m, r, rng), macro)


# -- iteration ------------------------------------------------------------------


def test_morph_zero_iterations_is_identity(rng):
    data = synthetic_dataset(per_class=10, resolution=8)
    m = toy_cnn(input_resolution=8).init_params(rng)
    out, report = morph_iterate(m, MorphConfig(target_bl=184, iterations=0), data, data, MacroConfig(), rng)
    assert out.conv_widths() == m.conv_widths() and report.iterations == []
    for k in m.params:
        assert out.params[k].data.tobytes() == m.params[k].data.tobytes()


def test_morph_iteration_respects_budget():
    rng = np.random.default_rng(3)
    tr, te = train_test_split(synthetic_dataset(per_class=100, resolution=8, seed=3))
    m = toy_cnn(input_resolution=8).init_params(rng)
    cfg = MorphConfig(target_bl=184, lambda_max=1e-4, ramp_epochs=1, shrink_epochs=20, finetune_epochs=1,
                      iterations=2)
    out, report = morph_iterate(m, cfg, tr, te, MacroConfig(), rng)
    assert len(report.iterations) == 2
    for entry in report.iterations:
        assert entry["pruned"]["used_bls"] <= 184
        assert entry["used_bls"] <= 184 and entry["ratio"] >= 1.0
    assert used_bitlines(out, MacroConfig()) == report.iterations[-1]["used_bls"]
