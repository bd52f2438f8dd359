import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from splitpriv.errors import NumericError, ShapeError
from splitpriv.losses import LossSpec
from splitpriv.modelgraph import (ModelGraph, ParamStore, TensorSpec, batchnorm2d, build_model, conv2d, flatten,
                                  forward, infer_shapes, init_params, linear, loss_and_grads, maxpool2d, predict,
                                  profile, relu, residual_block)

# --- finite-difference oracle ------------------------------------------------------------

H = 1e-5
TOL = 1e-4
TRIALS = 20


def fd_grads(graph, params, batch, spec, names, mode):
    out = {}
    full = graph.trainable_names()
    for name in names:
        arr = params[name]
        g = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            old = arr[idx]
            arr[idx] = old + H
            lp, _ = loss_and_grads(graph, params, batch, spec, full, mode)
            arr[idx] = old - H
            lm, _ = loss_and_grads(graph, params, batch, spec, full, mode)
            arr[idx] = old
            g[idx] = (lp - lm) / (2 * H)
        out[name] = g
    return out


def rel_err(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(a) + np.linalg.norm(b), 1e-12)


def check_gradients(layers, in_shape, n_classes, checked, mode="train", loss="ce", seed=0):
    graph = ModelGraph(tuple(layers), TensorSpec(in_shape, "float64"), n_classes)
    worst = 0.0
    for trial in range(TRIALS):
        r = np.random.default_rng([seed, trial])
        params = init_params(graph, seed=trial, dtype="float64")
        # perturb batchnorm affine terms away from their trivial init
        for name in params.names():
            if "bn" in name and not name.endswith(("running_mean", "running_var")):
                params.tensors[name] = params[name] + 0.3 * r.standard_normal(params[name].shape)
        x = r.standard_normal((4,) + in_shape)
        if loss == "ce":
            y = r.integers(0, n_classes, 4)
        else:
            y = r.standard_normal((4, n_classes))
        spec = LossSpec(loss, 0.1)
        _, grads = loss_and_grads(graph, params, (x, y), spec, graph.trainable_names(), mode)
        fd = fd_grads(graph, params, (x, y), spec, checked, mode)
        for name in checked:
            worst = max(worst, rel_err(grads[name], fd[name]))
    return worst


def test_gradient_linear_squared_loss():
    worst = check_gradients([linear("fc", 5, 3)], (5,), 3, ["fc.weight", "fc.bias"], loss="mse")
    assert worst <= TOL


def test_gradient_conv2d():
    layers = [conv2d("c", 2, 3, 3, 1, 1), flatten("f"), linear("fc", 3 * 5 * 5, 3)]
    assert check_gradients(layers, (2, 5, 5), 3, ["c.weight", "c.bias"]) <= TOL


def test_gradient_conv2d_strided_unpadded():
    layers = [conv2d("c", 1, 2, 3, 2, 0), flatten("f"), linear("fc", 2 * 3 * 3, 3)]
    assert check_gradients(layers, (1, 7, 7), 3, ["c.weight", "c.bias"]) <= TOL


def test_gradient_through_relu():
    layers = [linear("fc1", 4, 6), relu("r"), linear("fc2", 6, 3)]
    assert check_gradients(layers, (4,), 3, ["fc1.weight", "fc1.bias"]) <= TOL


def test_gradient_through_maxpool():
    layers = [conv2d("c", 1, 2, 3, 1, 1), maxpool2d("p", 2), flatten("f"), linear("fc", 2 * 3 * 3, 3)]
    assert check_gradients(layers, (1, 6, 6), 3, ["c.weight", "c.bias"]) <= TOL


def test_gradient_through_flatten():
    layers = [flatten("f"), linear("fc", 12, 3)]
    assert check_gradients(layers, (3, 2, 2), 3, ["fc.weight"]) <= TOL


@pytest.mark.parametrize("mode", ["train", "eval"])
def test_gradient_batchnorm(mode):
    layers = [conv2d("c", 1, 2, 3, 1, 1), batchnorm2d("bn", 2), flatten("f"), linear("fc", 2 * 4 * 4, 3)]
    worst = check_gradients(layers, (1, 4, 4), 3, ["bn.weight", "bn.bias", "c.weight"], mode=mode)
    assert worst <= TOL


@pytest.mark.parametrize("mode", ["train", "eval"])
def test_gradient_residual_block(mode):
    block = residual_block("b", [conv2d("ca", 2, 2, 3, 1, 1), batchnorm2d("bna", 2), relu("ra"),
                                 conv2d("cb", 2, 2, 3, 1, 1), batchnorm2d("bnb", 2)])
    layers = [block, flatten("f"), linear("fc", 2 * 4 * 4, 3)]
    checked = ["b.ca.weight", "b.bna.weight", "b.cb.weight", "b.bnb.bias"]
    if mode == "eval":
        # batch statistics cancel a conv bias feeding batchnorm; only eval mode sees it
        checked += ["b.ca.bias", "b.cb.bias"]
    assert check_gradients(layers, (2, 4, 4), 3, checked, mode=mode) <= TOL


# --- forward -------------------------------------------------------------------------------


def test_identity_linear_passes_input_through():
    graph = ModelGraph((linear("id", 4, 4),), TensorSpec((4,), "float64"), 4)
    params = ParamStore({"id.weight": np.eye(4), "id.bias": np.zeros(4)})
    x = np.random.default_rng(0).standard_normal((3, 4))
    np.testing.assert_array_equal(forward(graph, params, x).activations[0], x)


def test_relu_definition():
    graph = ModelGraph((relu("r"),), TensorSpec((3,), "float64"), 3)
    out = forward(graph, ParamStore({}), np.array([[-1.0, 0.0, 2.0]]))
    np.testing.assert_array_equal(out.logits, [[0.0, 0.0, 2.0]])


def test_mini5_smoke():
    graph, params = build_model("mini5", TensorSpec((1, 28, 28)), 10)
    x = np.random.default_rng(0).random((6, 1, 28, 28), dtype=np.float32)
    res = forward(graph, params, x)
    assert res.logits.shape == (6, 10)
    assert np.isfinite(res.logits).all()
    assert len(res.activations) == len(graph.layers)


def test_mini5_structure():
    graph, _ = build_model("mini5", TensorSpec((1, 28, 28)), 10)
    kinds = [l.kind for l in graph.layers]
    assert kinds.count("conv2d") == 5 and kinds.count("linear") == 2
    g2, _ = build_model("mini5", TensorSpec((1, 28, 28)), 2)
    assert g2.layers[-1].hyperparams["out_features"] == 2
    assert [l.name for l in g2.layers[:-1]] == [l.name for l in graph.layers[:-1]]


def test_shape_chain_error_names_layer():
    with pytest.raises(ShapeError, match="conv2"):
        ModelGraph((conv2d("conv1", 3, 8), conv2d("conv2", 16, 8)), TensorSpec((3, 8, 8)), None)


def test_forward_rejects_wrong_input_shape():
    graph, params = build_model("mini5", TensorSpec((1, 28, 28)), 10)
    with pytest.raises(ShapeError):
        forward(graph, params, np.zeros((2, 1, 27, 28), np.float32))


def test_non_finite_activation_names_layer():
    graph, params = build_model("mlp", TensorSpec((4,)), 2)
    params.tensors["fc1.weight"][0, 0] = np.inf
    with pytest.raises(NumericError, match="fc1"):
        forward(graph, params, np.ones((1, 4), np.float32))


def test_eval_mode_bitwise_deterministic():
    graph, params = build_model("mini-res", TensorSpec((1, 28, 28)), 10)
    x = np.random.default_rng(1).random((5, 1, 28, 28), dtype=np.float32)
    a = forward(graph, params, x).logits
    b = forward(graph, params, x).logits
    assert a.tobytes() == b.tobytes()


@settings(max_examples=25, deadline=None)
@given(st.lists(st.sampled_from(["conv", "relu", "pool", "bn"]), min_size=1, max_size=5),
       st.integers(4, 10), st.integers(1, 3))
def test_infer_shapes_iff_forward(kinds, size, channels):
    layers, c = [], channels
    for i, k in enumerate(kinds):
        if k == "conv":
            layers.append(conv2d(f"l{i}", c, 2, 3, 1, 0))
            c = 2
        elif k == "relu":
            layers.append(relu(f"l{i}"))
        elif k == "pool":
            layers.append(maxpool2d(f"l{i}", 2))
        else:
            layers.append(batchnorm2d(f"l{i}", c))
    try:
        infer_shapes(layers, (channels, size, size))
        ok = True
    except ShapeError:
        ok = False
    if not ok:
        with pytest.raises(ShapeError):
            ModelGraph(tuple(layers), TensorSpec((channels, size, size)), None)
        return
    graph = ModelGraph(tuple(layers), TensorSpec((channels, size, size)), None)
    params = init_params(graph)
    out = predict(graph, params, np.zeros((2, channels, size, size), np.float32))
    assert out.shape[1:] == graph.output_shapes[-1]


# --- masks ------------------------------------------------------------------------------------


def _batch(graph, n=8):
    r = np.random.default_rng(0)
    return r.random((n,) + graph.input_spec.shape, dtype=np.float32), r.integers(0, 10, n)


def test_full_mask_returns_every_gradient():
    graph, params = build_model("mini5", TensorSpec((1, 28, 28)), 10)
    _, grads = loss_and_grads(graph, params, _batch(graph), LossSpec(), graph.trainable_names())
    assert set(grads) == set(graph.trainable_names())


def test_partial_mask_leaves_other_params_untouched():
    graph, params = build_model("mini-res", TensorSpec((1, 28, 28)), 10)
    before = params.copy()
    mask = [n for n in graph.trainable_names() if n.startswith("fc")]
    _, grads = loss_and_grads(graph, params, _batch(graph), LossSpec(), mask)
    assert set(grads) == set(mask)
    for name in params.names():
        assert params[name].tobytes() == before[name].tobytes()


def test_mask_errors():
    graph, params = build_model("mini5", TensorSpec((1, 28, 28)), 10)
    with pytest.raises(ValueError):
        loss_and_grads(graph, params, _batch(graph), LossSpec(), [])
    with pytest.raises(KeyError):
        loss_and_grads(graph, params, _batch(graph), LossSpec(), ["nope.weight"])


# --- profile ------------------------------------------------------------------------------------


def test_profile_hand_counts():
    graph = ModelGraph((conv2d("c", 3, 16, 3, 1, 1), relu("r"), flatten("f"), linear("fc", 16 * 32 * 32, 10)),
                       TensorSpec((3, 32, 32)), 10)
    prof = {p.name: p for p in profile(graph)}
    assert prof["c"].params == 448
    assert prof["c"].flops == 884_736
    assert prof["r"].params == 0
    g2 = ModelGraph((linear("fc", 64, 10),), TensorSpec((64,)), 10)
    (p,) = profile(g2)
    assert (p.params, p.flops) == (650, 1280)


def test_profile_nonnegative_and_matches_param_count():
    for arch in ("mini5", "mini-res"):
        graph, params = build_model(arch, TensorSpec((1, 28, 28)), 10)
        prof = profile(graph)
        assert all(p.params >= 0 and p.flops >= 0 for p in prof)
        trainable = sum(params[n].size for n in graph.trainable_names())
        assert sum(p.params for p in prof) == trainable
