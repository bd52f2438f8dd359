import numpy as np
import pytest

from splitpriv.errors import ShapeError
from splitpriv.modelgraph import ModelGraph, TensorSpec, build_model, conv2d, flatten, linear, predict, relu
from splitpriv.splitter import CutPoint, edge_ratio, enumerate_cutpoints, find_cut, split

SPEC = TensorSpec((1, 28, 28))


def test_mini5_cuts():
    graph, _ = build_model("mini5", SPEC, 10)
    assert [c.label for c in enumerate_cutpoints(graph)] == ["conv1", "conv2", "conv3", "conv4", "conv5"]


def test_mlp_has_no_cuts():
    graph, _ = build_model("mlp", SPEC, 10)
    assert enumerate_cutpoints(graph) == []


def test_mini_res_cuts_at_blocks():
    graph, _ = build_model("mini-res", SPEC, 10)
    cuts = enumerate_cutpoints(graph)
    assert [c.label for c in cuts] == ["block1", "block2", "block3"]
    assert all(graph.layers[c.index].kind == "residual_block" for c in cuts)


def test_conv1_edge_group_and_deepest_cloud():
    graph, params = build_model("mini5", SPEC, 10)
    s = split(graph, params, find_cut(graph, "conv1"))
    assert [l.name for l in s.edge.layers] == ["conv1", "relu1", "pool1"]
    deep = split(graph, params, find_cut(graph, "conv5"))
    assert {l.kind for l in deep.cloud.layers} <= {"flatten", "linear", "relu"}
    assert deep.cloud.layers[0].kind == "flatten"


@pytest.mark.parametrize("arch", ["mini5", "mini-res"])
def test_partition_and_interface(arch):
    graph, params = build_model(arch, SPEC, 10)
    for cut in enumerate_cutpoints(graph):
        s = split(graph, params, cut)
        assert s.edge.layers + s.cloud.layers == graph.layers
        assert s.interface_spec.shape == s.edge.output_shapes[-1]
        assert set(s.edge_params.names()) | set(s.cloud_params.names()) == set(params.names())
        assert not set(s.edge_params.names()) & set(s.cloud_params.names())


@pytest.mark.parametrize("arch", ["mini5", "mini-res"])
def test_composition_equivalence(arch):
    graph, params = build_model(arch, SPEC, 10, seed=2)
    x = np.random.default_rng(0).random((100, 1, 28, 28), dtype=np.float32)
    full = predict(graph, params, x)
    for cut in enumerate_cutpoints(graph):
        s = split(graph, params, cut)
        composed = predict(s.cloud, s.cloud_params, predict(s.edge, s.edge_params, x))
        assert np.max(np.abs(composed - full)) <= 1e-6


def test_invalid_cut():
    graph, params = build_model("mini5", SPEC, 10)
    with pytest.raises(ShapeError):
        split(graph, params, CutPoint(1, "relu1"))
    with pytest.raises(ShapeError):
        find_cut(graph, "conv9")


@pytest.mark.parametrize("arch", ["mini5", "mini-res"])
def test_ratios_bounded_and_monotone(arch):
    graph, _ = build_model(arch, SPEC, 10)
    ratios = [edge_ratio(graph, c) for c in enumerate_cutpoints(graph)]
    for r in ratios:
        assert 0 <= r["flops_ratio"] <= 1 and 0 <= r["params_ratio"] <= 1
    flops = [r["flops_ratio"] for r in ratios]
    assert flops == sorted(flops)


def test_mini5_ratio_shape():
    graph, _ = build_model("mini5", SPEC, 10)
    cuts = enumerate_cutpoints(graph)
    assert edge_ratio(graph, cuts[-1])["flops_ratio"] >= 0.9
    assert edge_ratio(graph, cuts[0])["params_ratio"] < 0.01


def test_single_conv_ratio_by_hand():
    graph = ModelGraph((conv2d("c", 1, 2, 3, 1, 1), relu("r"), flatten("f"), linear("fc", 2 * 4 * 4, 3)),
                       TensorSpec((1, 4, 4)), 3)
    (cut,) = enumerate_cutpoints(graph)
    conv_f, relu_f, fc_f = 2 * 9 * 1 * 2 * 16, 32, 2 * 32 * 3
    conv_p, fc_p = 2 * 9 + 2, 32 * 3 + 3
    r = edge_ratio(graph, cut)
    assert r["flops_ratio"] == pytest.approx((conv_f + relu_f) / (conv_f + relu_f + fc_f))
    assert r["params_ratio"] == pytest.approx(conv_p / (conv_p + fc_p))
