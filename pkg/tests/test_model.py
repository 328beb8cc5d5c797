import numpy as np
import pytest

from cimadapt.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from cimadapt.engine import Parameter
from cimadapt.model import GraphError, LayerSpec, ModelGraph, build, fold_bn, param_count, toy_cnn
from cimadapt.network import predict


def conv_stack(widths, k=3, bn=False, head=None):
    layers, c = [], widths[0]
    for i, w in enumerate(widths[1:]):
        layers.append(LayerSpec(f"c{i}", "conv", [], c, w, k))
        if bn:
            layers.append(LayerSpec(f"b{i}", "batchnorm"))
        c = w
    if head:
        layers.append(LayerSpec("gap", "avgpool", kernel_size=0))
        layers.append(LayerSpec("fc", "linear", in_channels=c, out_channels=head))
    return ModelGraph(layers, widths[0], 8)


def randomize_bn(model, rng):
    for layer in model.layers:
        if layer.kind == "batchnorm":
            n = layer.name
            c = len(model.params[f"{n}.gamma"].data)
            model.params[f"{n}.gamma"] = Parameter(rng.uniform(0.5, 2.0, c))
            model.params[f"{n}.beta"] = Parameter(rng.standard_normal(c))
            model.buffers[f"{n}.running_mean"] = rng.standard_normal(c)
            model.buffers[f"{n}.running_var"] = rng.uniform(0.5, 2.0, c)


def test_param_count_examples():
    assert param_count(conv_stack([3, 16])) == 432
    assert param_count(conv_stack([3, 8, 8])) == 792
    head_only = ModelGraph([LayerSpec("gap", "avgpool", kernel_size=0),
                            LayerSpec("fc", "linear", in_channels=3, out_channels=10)], 3, 8)
    assert param_count(head_only) == 3 * 10 + 10


def test_toy_cnn_topology():
    m = toy_cnn()
    assert [(c.in_channels, c.out_channels, c.kernel_size) for c in m.conv_layers()] == [
        (3, 16, 3), (16, 32, 3), (32, 64, 3), (64, 64, 3)]
    assert sum(layer.kind == "maxpool" for layer in m.layers) == 2
    assert m.layers[-1].kind == "linear"
    assert all(m.bn_after(c) is not None for c in m.conv_layers())


def test_fold_bn_identity_and_scale(rng):
    m = conv_stack([2, 3], bn=True).init_params(rng)
    eps = 1e-5
    w = m.params["c0.weight"].data.copy()
    m.buffers["b0.running_var"] = np.full(3, 1 - eps)
    f = fold_bn(m)
    np.testing.assert_allclose(f.params["c0.weight"].data, w, atol=1e-12)
    np.testing.assert_allclose(f.params["c0.bias"].data, 0.0, atol=1e-12)
    m.params["b0.gamma"] = Parameter(np.full(3, 2.0))
    m.params["b0.beta"] = Parameter(np.ones(3))
    f = fold_bn(m)
    np.testing.assert_allclose(f.params["c0.weight"].data, 2 * w, atol=1e-12)
    np.testing.assert_allclose(f.params["c0.bias"].data, 1.0, atol=1e-12)


def test_fold_bn_equivalence(macro, rng):
    m = build("toy-cnn", rng)
    randomize_bn(m, rng)
    f = fold_bn(m)
    assert not any(layer.kind == "batchnorm" for layer in f.layers)
    x = rng.random((10, 3, 16, 16))
    a, b = predict(m, x, macro), predict(f, x, macro)
    assert np.abs(a - b).max() <= 1e-9 * np.abs(a).max()
    # idempotent
    g = fold_bn(f)
    assert all(np.array_equal(g.params[k].data, f.params[k].data) for k in f.params)


def test_fold_bn_leaves_bare_conv(rng):
    m = conv_stack([2, 3]).init_params(rng)
    f = fold_bn(m)
    assert np.array_equal(f.params["c0.weight"].data, m.params["c0.weight"].data)


def test_residual_shape_mismatch_rejected():
    layers = [LayerSpec("a", "conv", [], 3, 8, 3), LayerSpec("b", "conv", ["a"], 8, 4, 3),
              LayerSpec("add", "residual-add", ["a", "b"])]
    with pytest.raises(GraphError, match="shape mismatch"):
        ModelGraph(layers, 3, 8)


def test_graph_validation_errors():
    with pytest.raises(GraphError):
        LayerSpec("x", "dense")
    with pytest.raises(GraphError, match="before it is produced"):
        ModelGraph([LayerSpec("a", "relu", ["zzz"])], 3, 8)
    with pytest.raises(GraphError, match="expects 4 channels"):
        ModelGraph([LayerSpec("a", "conv", [], 4, 8, 3)], 3, 8)


def test_resnet_channel_groups_merge_residuals():
    m = build("resnet18")
    g = m.channel_groups()
    # identity shortcut ties stem output to the first stage's second conv
    assert g["s1b1_conv2"] == g["stem"] == g["s1b2_conv2"]
    # projection shortcut opens a new space shared by the block's add
    assert g["s2b1_conv2"] == g["s2b1_short"] != g["s2b1_conv1"]


def test_checkpoint_round_trip(tmp_path, rng):
    m = build("resnet18", rng, widths=(8, 16, 16, 32), blocks=(1, 1, 1, 1), input_resolution=16)
    m.params["stem.weight"].freeze()
    p = tmp_path / "m.ckpt"
    save_checkpoint(m, p, {"stage": "x"})
    back, meta = load_checkpoint(p, with_meta=True)
    assert meta == {"stage": "x"}
    assert back.describe() == m.describe()
    assert param_count(back) == param_count(m)
    assert set(back.params) == set(m.params)
    for k, v in m.params.items():
        assert back.params[k].data.tobytes() == v.data.tobytes()
        assert back.params[k].trainable == v.trainable
    for k, v in m.buffers.items():
        assert back.buffers[k].tobytes() == v.tobytes()


def test_checkpoint_corruption(tmp_path, rng):
    m = toy_cnn().init_params(rng)
    p = tmp_path / "m.ckpt"
    save_checkpoint(m, p)
    raw = p.read_bytes()
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"XXXXXXXX" + raw[8:])
    with pytest.raises(CheckpointError, match="not a checkpoint"):
        load_checkpoint(bad)
    bad.write_bytes(raw[:-100])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(bad)
    bad.write_bytes(raw[:8] + (99).to_bytes(4, "little") + raw[12:])
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(bad)
