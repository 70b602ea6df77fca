import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from splitedge.errors import CacheError, ShapeError
from splitedge.nn import (LAYER_KINDS, ModelProfile, SegmentState, as_tensor, backward_segment, build_profile,
                          bytes_of, cnn_profile, forward_segment, init_segment, join_segments, loss_grad,
                          make_layer, mlp_profile, sgd_step, split_segment, weighted_mean)

from util import gradient_error, numeric_grad, rel_err, single_layer_segment


# --------------------------------------------------------------------------- tensors and sizes

def test_as_tensor_rejects_non_finite_and_bad_shapes():
    assert as_tensor([1, 2, 3, 4], (2, 2)).shape == (2, 2)
    with pytest.raises(ValueError):
        as_tensor([1.0, float("nan")])
    with pytest.raises(ValueError):
        as_tensor([1.0, float("inf")])
    with pytest.raises(ShapeError):
        as_tensor([1, 2, 3], (2, 2))


@pytest.mark.parametrize("shape,bits,expected", [
    ((32, 4096), 32, 524_288),
    ((1,), 8, 1),
    ((3, 5), 4, 8),
    ((7,), 1, 1),
    ((9,), 1, 2),
])
def test_bytes_of(shape, bits, expected):
    assert bytes_of(shape, bits) == expected


def test_activation_size_is_order_of_half_megabyte():
    # a batch of 32 activations with 4096 values each sits next to ~0.49 MB
    mb = bytes_of((32, 4096), 32) / 2**20
    assert 0.4 < mb < 0.6


@given(st.lists(st.integers(1, 50), min_size=1, max_size=4), st.sampled_from([32, 16, 8, 4, 2, 1]))
def test_bytes_of_is_ceiling(shape, bits):
    n = math.prod(shape)
    assert bytes_of(shape, bits) == math.ceil(n * bits / 8)


# --------------------------------------------------------------------------- profiles

def test_layer_specs_and_profile_invariants():
    prof = cnn_profile(6, 4, 3)
    for a, b in zip(prof.layers, prof.layers[1:]):
        assert a.out_shape == b.in_shape
    for layer in prof.layers:
        if layer.kind in ("relu", "flatten"):
            assert layer.param_count == 0
    assert prof.layers[0].out_shape == (4, 4, 4)      # 3x3 valid convolution
    assert prof.cut_shape(0) == (1, 6, 6)
    assert prof.cut_shape(prof.L) == (3,)


def test_profile_rejects_unchainable_layers():
    with pytest.raises(ShapeError, match="layer 0"):
        ModelProfile((make_layer("dense", (4,), 3), make_layer("dense", (5,), 2)))
    with pytest.raises(ValueError):
        ModelProfile((make_layer("dense", (4,), 3),))
    with pytest.raises(ShapeError, match="layer 1"):
        build_profile((4,), [{"kind": "dense", "units": 3}, {"kind": "conv2d-small", "units": 2}])


def test_default_costs():
    d = make_layer("dense", (4,), 3)
    assert d.param_count == 15
    assert d.fwd_cycles_per_sample == 24.0
    assert d.bwd_cycles_per_sample == 48.0
    custom = make_layer("dense", (4,), 3, fwd_cycles=7, bwd_cycles=9)
    assert (custom.fwd_cycles_per_sample, custom.bwd_cycles_per_sample) == (7.0, 9.0)


def test_init_is_independent_of_split_point():
    prof = mlp_profile(5, 7, 3)
    full = init_segment(prof, 0, prof.L, 11)
    for cut in range(prof.L + 1):
        head = init_segment(prof, 0, cut, 11)
        tail = init_segment(prof, cut, prof.L, 11)
        joined = join_segments(head, tail)
        assert np.array_equal(joined.flat(), full.flat())


# --------------------------------------------------------------------------- forward

def test_identity_dense_forward():
    seg = single_layer_segment("dense", (2,), 2)
    seg = SegmentState(seg.profile, (0, 1), ({"W": np.eye(2), "b": np.zeros(2)},))
    out, _ = forward_segment(seg, np.array([[1.0, 2.0], [3.0, 4.0]]))
    assert np.array_equal(out, [[1.0, 2.0], [3.0, 4.0]])


def test_relu_forward():
    seg = single_layer_segment("relu", (3,))
    out, _ = forward_segment(seg, np.array([[-1.0, 0.0, 2.0]]))
    assert np.array_equal(out, [[0.0, 0.0, 2.0]])


def test_two_layer_dense_matches_hand_product():
    prof = build_profile((2,), [{"kind": "dense", "units": 3}, {"kind": "dense", "units": 2}])
    seg = init_segment(prof, 0, 2, 5)
    x = np.ones((1, 2))
    (W1, b1), (W2, b2) = [(p["W"], p["b"]) for p in seg.params]
    h = [sum(W1[i, j] * 1.0 for j in range(2)) + b1[i] for i in range(3)]
    y = [sum(W2[i, j] * h[j] for j in range(3)) + b2[i] for i in range(2)]
    out, _ = forward_segment(seg, x)
    assert np.allclose(out[0], y, rtol=1e-14, atol=1e-14)


def test_forward_shape_error_names_layer():
    prof = mlp_profile(4, 6, 3)
    _, tail = split_segment(init_segment(prof, 0, prof.L, 0), 2)
    with pytest.raises(ShapeError, match="layer 2"):
        forward_segment(tail, np.zeros((3, 4)))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 4), st.integers(0, 2**31 - 1), st.integers(1, 6))
def test_segment_composition_is_exact(cut, seed, batch):
    prof = mlp_profile(4, 6, 3)
    full = init_segment(prof, 0, prof.L, seed)
    x = np.random.default_rng(seed).normal(size=(batch, 4))
    head, tail = split_segment(full, cut)
    h, _ = forward_segment(head, x)
    out_split, _ = forward_segment(tail, h)
    out_full, _ = forward_segment(full, x)
    assert np.array_equal(out_split, out_full)


def test_forward_is_deterministic():
    prof = cnn_profile(5, 3, 2)
    x = np.random.default_rng(0).normal(size=(4, 1, 5, 5))
    a, _ = forward_segment(init_segment(prof, 0, prof.L, 3), x)
    b, _ = forward_segment(init_segment(prof, 0, prof.L, 3), x)
    assert np.array_equal(a, b)


# --------------------------------------------------------------------------- backward

def test_dense_backward_outer_product():
    seg = single_layer_segment("dense", (3,), 2)
    x = np.array([[0.5, -1.0, 2.0]])
    _, cache = forward_segment(seg, x)
    _, grads = backward_segment(seg, cache, np.array([[1.0, 0.0]]))
    assert np.array_equal(grads[0]["W"], np.outer([1.0, 0.0], x[0]))


def test_relu_backward_gate():
    seg = single_layer_segment("relu", (2,))
    _, cache = forward_segment(seg, np.array([[-1.0, 2.0]]))
    g, _ = backward_segment(seg, cache, np.array([[5.0, 5.0]]))
    assert np.array_equal(g, [[0.0, 5.0]])


def test_backward_rejects_missing_stale_and_misshaped():
    prof = mlp_profile(4, 6, 3)
    seg = init_segment(prof, 0, 2, 0)
    out, cache = forward_segment(seg, np.ones((2, 4)))
    with pytest.raises(CacheError):
        backward_segment(seg, None, out)
    stepped = sgd_step(seg, backward_segment(seg, cache, out)[1], 0.1)
    with pytest.raises(CacheError, match="stale"):
        backward_segment(stepped, cache, out)
    other = init_segment(prof, 2, 4, 0)
    with pytest.raises(CacheError):
        backward_segment(other, cache, out)
    with pytest.raises(ShapeError):
        backward_segment(seg, cache, np.ones((2, 5)))


LAYER_CASES = {
    "dense": ("dense", (5,), 4),
    "relu": ("relu", (6,), None),
    "conv2d-small": ("conv2d-small", (2, 5, 6), 3),
    "flatten": ("flatten", (2, 3, 4), None),
    "softmax-head": ("softmax-head", (5,), 3),
}


def test_every_layer_kind_has_a_gradient_case():
    assert set(LAYER_CASES) == set(LAYER_KINDS)


def layer_gradient_errors(kind, instance):
    k, shape, units = LAYER_CASES[kind]
    return gradient_error(k, shape, units, instance)


@pytest.mark.parametrize("kind", sorted(LAYER_CASES))
def test_layer_gradients_match_finite_differences(kind):
    for instance in range(3):
        assert layer_gradient_errors(kind, instance) < 1e-5


def test_whole_model_gradient_matches_finite_differences():
    prof = cnn_profile(5, 2, 3)
    seg = init_segment(prof, 0, prof.L, 1)
    rng = np.random.default_rng(2)
    x = rng.normal(size=(2, 1, 5, 5))
    y = np.array([0, 2])

    def f():
        return loss_grad(forward_segment(seg, x)[0], y)[0]

    out, cache = forward_segment(seg, x)
    _, g = loss_grad(out, y)
    _, grads = backward_segment(seg, cache, g)
    for p, gp in zip(seg.params, grads):
        for name in p:
            assert rel_err(gp[name], numeric_grad(f, p[name])) < 1e-5


# --------------------------------------------------------------------------- loss and SGD

def test_uniform_logits_give_ln2():
    loss, grad = loss_grad(np.zeros((4, 2)), np.array([0, 1, 1, 0]))
    assert loss == pytest.approx(math.log(2), abs=1e-15)
    assert np.allclose(grad.sum(axis=1), 0.0)


def test_confident_correct_logits_give_zero_loss():
    loss, _ = loss_grad(np.array([[50.0, -50.0], [-50.0, 50.0]]), np.array([0, 1]))
    assert 0.0 <= loss < 1e-30


def test_loss_grad_matches_finite_differences():
    rng = np.random.default_rng(4)
    logits = rng.normal(size=(5, 4))
    y = rng.integers(0, 4, size=5)
    loss, g = loss_grad(logits, y)
    assert loss >= 0
    assert np.allclose(g.sum(axis=1), 0.0, atol=1e-15)
    assert rel_err(g, numeric_grad(lambda: loss_grad(logits, y)[0], logits)) < 1e-5


def test_loss_rejects_bad_labels():
    with pytest.raises(ValueError):
        loss_grad(np.zeros((2, 3)), np.array([0, 3]))
    with pytest.raises(ShapeError):
        loss_grad(np.zeros((2, 3)), np.array([0]))


def test_sgd_step_arithmetic_and_fixed_point():
    seg = single_layer_segment("dense", (1,), 1)
    seg = SegmentState(seg.profile, (0, 1), ({"W": np.array([[1.0]]), "b": np.array([0.0])},))
    new = sgd_step(seg, ({"W": np.array([[0.5]]), "b": np.array([0.0])},), 0.1)
    assert new.params[0]["W"][0, 0] == 0.95
    assert new.version == seg.version + 1
    zero = sgd_step(seg, ({"W": np.zeros((1, 1)), "b": np.zeros(1)},), 0.1)
    assert np.array_equal(zero.flat(), seg.flat())
    with pytest.raises(ValueError):
        sgd_step(seg, ({"W": np.zeros((1, 1)), "b": np.zeros(1)},), 0.0)
    with pytest.raises(ShapeError):
        sgd_step(seg, ({"W": np.zeros((2, 1)), "b": np.zeros(1)},), 0.1)


def test_two_steps_equal_one_summed_step_on_frozen_linear_model():
    # with a frozen input the gradient of a linear model does not depend on W
    seg = single_layer_segment("dense", (3,), 2, seed=3)
    x = np.array([[1.0, -2.0, 0.5]])
    r = np.array([[0.3, -0.7]])
    _, cache = forward_segment(seg, x)
    _, g = backward_segment(seg, cache, r)
    two = sgd_step(sgd_step(seg, g, 0.1), g, 0.1)
    one = sgd_step(seg, ({k: 2 * v for k, v in g[0].items()},), 0.1)
    assert np.allclose(two.flat(), one.flat(), rtol=0, atol=1e-15)


def test_weighted_mean_single_item_is_exact():
    a = {"W": np.random.default_rng(0).normal(size=(3, 3))}
    assert np.array_equal(weighted_mean([a], [17])["W"], a["W"])
    m = weighted_mean([np.array([1.0]), np.array([3.0])], [1, 3])
    assert m[0] == 2.5
