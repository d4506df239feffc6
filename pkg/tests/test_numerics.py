import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import conv_naive, max_pool_naive
from ucascade.errors import ConfigError, DataError, NumericalError
from ucascade.numerics import (Conv, Dense, Dropout, Flatten, MaxPool, OptimState, ReLU, Sequential, Upsample,
                               as_tensor, check_layer, conv2d_forward, conv3d_forward, derive_seed, dropout,
                               grad_check, make_rng, max_pool, numeric_grad, optimizer_step, relative_error,
                               sigmoid, sigmoid_bce_loss, split_rngs, upsample_nn)
from ucascade.numerics import ops


def _conv_instance(rng, d):
    C, O, k = rng.integers(1, 4), rng.integers(1, 4), int(rng.choice([1, 2, 3]))
    stride, pad = int(rng.integers(1, 3)), int(rng.integers(0, 2))
    sp = tuple(int(rng.integers(k, k + 4)) for _ in range(d))
    x = rng.standard_normal((C,) + sp)
    w = rng.standard_normal((O, C) + (k,) * d)
    b = rng.standard_normal(O)
    return x, w, b, stride, pad


@pytest.mark.parametrize("d", [2, 3])
def test_conv_matches_loops(d):
    rng = np.random.default_rng(10 + d)
    fwd = conv2d_forward if d == 2 else conv3d_forward
    for _ in range(100):
        x, w, b, stride, pad = _conv_instance(rng, d)
        got = fwd(x, w, b, stride, pad)
        ref = conv_naive(x, w, b, stride, pad)
        assert got.shape == ref.shape
        np.testing.assert_allclose(got, ref, rtol=1e-7, atol=1e-12)


def test_conv_batched_equals_per_sample():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((5, 2, 7, 6))
    w = rng.standard_normal((3, 2, 3, 3))
    b = rng.standard_normal(3)
    out, _ = ops.conv_forward(x, w, b, 1, 1)
    for i in range(5):
        np.testing.assert_allclose(out[i], conv2d_forward(x[i], w, b, 1, 1), rtol=1e-12)


def test_conv_inference_mode_same_output_no_cache():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((2, 2, 6, 6))
    w = rng.standard_normal((2, 2, 3, 3))
    b = np.zeros(2)
    ref, cache = ops.conv_forward(x, w, b, 1, 1)
    with ops.inference():
        out, cache2 = ops.conv_forward(x, w, b, 1, 1)
    np.testing.assert_array_equal(out, ref)
    with pytest.raises(RuntimeError):
        ops.conv_backward(out, cache2)


def test_conv_shape_errors():
    with pytest.raises(ConfigError):
        conv2d_forward(np.zeros((2, 4, 4)), np.zeros((1, 3, 3, 3)), np.zeros(1))
    with pytest.raises(ConfigError):
        conv2d_forward(np.zeros((1, 2, 2)), np.zeros((1, 1, 5, 5)), np.zeros(1))


@pytest.mark.parametrize("dims", [2, 3])
def test_max_pool_matches_window_scan(dims):
    rng = np.random.default_rng(dims)
    for _ in range(100):
        window = int(rng.integers(1, 4))
        sp = tuple(int(rng.integers(window, window + 5)) for _ in range(dims))
        # small integer values make ties common; first maximum wins
        x = rng.integers(0, 4, size=(2,) + sp).astype(np.float64)
        out, idx = max_pool(x, window, dims=dims)
        ref, arg = max_pool_naive(x, window)
        np.testing.assert_array_equal(out, ref)
        np.testing.assert_array_equal(idx, arg)


def test_max_pool_backward_routes_to_argmax():
    x = np.array([[[[1.0, 5.0], [3.0, 2.0]]]])
    out, cache = ops.max_pool_forward(x, 2)
    assert out.item() == 5.0
    dx = ops.max_pool_backward(np.array([[[[7.0]]]]), cache)
    np.testing.assert_array_equal(dx, [[[[0, 7.0], [0, 0]]]])


def test_upsample_repeats_and_backward_sums():
    x = np.arange(4.0).reshape(1, 2, 2)
    up = upsample_nn(x, 2)
    assert up.shape == (1, 4, 4)
    np.testing.assert_array_equal(up[0, :2, :2], 0.0)
    np.testing.assert_array_equal(up[0, 2:, 2:], 3.0)
    _, cache = ops.upsample_nn_forward(x[None], 2)
    g = ops.upsample_nn_backward(np.ones((1, 1, 4, 4)), cache)
    np.testing.assert_array_equal(g, 4.0)


def test_relu_and_sigmoid():
    y, mask = ops.relu_forward(np.array([-1.0, 0.0, 2.0]))
    np.testing.assert_array_equal(y, [0, 0, 2])
    np.testing.assert_array_equal(ops.relu_backward(np.ones(3), mask), [0, 0, 1])
    z = np.array([-800.0, -1.0, 0.0, 1.0, 800.0])
    s = sigmoid(z)
    assert np.all(np.isfinite(s))
    assert s[2] == 0.5 and s[0] == 0.0 and s[-1] == 1.0
    np.testing.assert_allclose(s[1] + s[3], 1.0)


def test_dropout_modes():
    x = np.ones((4, 1000))
    y, _ = dropout(x, 0.5, mode="eval")
    np.testing.assert_array_equal(y, x)
    y, mask = dropout(x, 0.5, make_rng(0), "mc")
    assert set(np.unique(y)) <= {0.0, 2.0}
    assert abs(y.mean() - 1.0) < 0.05
    np.testing.assert_array_equal(y, x * mask)
    y0, _ = dropout(x, 0.0, make_rng(0), "train")
    np.testing.assert_array_equal(y0, x)
    with pytest.raises(ConfigError):
        dropout(x, 1.0, make_rng(0))
    with pytest.raises(ConfigError):
        dropout(x, 0.5, None, "mc")
    with pytest.raises(ConfigError):
        dropout(x, 0.5, make_rng(0), "sometimes")


def test_dropout_per_sample_streams_ignore_batching():
    x = np.ones((6, 3, 5))
    full, _ = ops.dropout_forward(x, 0.3, split_rngs(9, 6), "mc")
    rngs = split_rngs(9, 6)
    parts = [ops.dropout_forward(x[:2], 0.3, rngs[:2], "mc")[0], ops.dropout_forward(x[2:], 0.3, rngs[2:], "mc")[0]]
    np.testing.assert_array_equal(full, np.concatenate(parts))


def test_bce_values_and_gradient():
    z = np.array([-2.0, 0.0, 3.0])
    y = np.array([0.0, 1.0, 1.0])
    loss, g = sigmoid_bce_loss(z, y)
    p = 1 / (1 + np.exp(-z))
    ref = -np.mean(y * np.log(p) + (1 - y) * np.log(1 - p))
    assert loss == pytest.approx(ref, rel=1e-12)
    np.testing.assert_allclose(g, (p - y) / 3, rtol=1e-12)
    w = np.array([1.0, 4.0, 1.0])
    lw, gw = sigmoid_bce_loss(z, y, w)
    assert lw == pytest.approx(np.sum(w * -(y * np.log(p) + (1 - y) * np.log(1 - p))) / 6, rel=1e-12)
    zz = z.copy()
    assert grad_check(lambda: (sigmoid_bce_loss(zz, y, w)[0], {"z": sigmoid_bce_loss(zz, y, w)[1]}),
                      {"z": zz}) < 1e-6


def test_bce_is_capped_and_validated():
    loss, _ = sigmoid_bce_loss(np.array([-100.0]), np.array([1.0]))
    assert loss == pytest.approx(-math.log(1e-7))
    with pytest.raises(ConfigError):
        sigmoid_bce_loss(np.zeros(2), np.zeros(2), np.zeros(2))
    with pytest.raises(ConfigError):
        sigmoid_bce_loss(np.zeros(2), np.zeros(3))
    with pytest.raises(NumericalError):
        sigmoid_bce_loss(np.array([np.nan]), np.array([1.0]))


@pytest.mark.parametrize("kind", ["sgd", "adam"])
def test_optimizer_zero_lr_leaves_params(kind):
    p = {"w": np.arange(3.0)}
    optimizer_step(p, {"w": np.ones(3)}, OptimState(lr=0.0, kind=kind))
    np.testing.assert_array_equal(p["w"], np.arange(3.0))


def test_optimizer_steps():
    p = {"w": np.zeros(2)}
    optimizer_step(p, {"w": np.array([1.0, -2.0])}, OptimState(lr=0.1, kind="sgd"))
    np.testing.assert_allclose(p["w"], [-0.1, 0.2])
    p = {"w": np.zeros(2)}
    # first Adam step moves each coordinate by lr against the gradient sign
    optimizer_step(p, {"w": np.array([3.0, -0.01])}, OptimState(lr=0.1))
    np.testing.assert_allclose(p["w"], [-0.1, 0.1], rtol=1e-5)
    with pytest.raises(NumericalError):
        optimizer_step(p, {"w": np.array([np.inf, 0.0])}, OptimState(lr=0.1))
    with pytest.raises(ConfigError):
        optimizer_step(p, {"w": np.zeros(3)}, OptimState(lr=0.1))
    with pytest.raises(ConfigError):
        OptimState(lr=0.1, kind="rmsprop")


def test_tensor_helpers():
    np.testing.assert_array_equal(as_tensor([1, 2, 3, 4], shape=(2, 2)), [[1, 2], [3, 4]])
    with pytest.raises(DataError):
        as_tensor([1.0, np.nan])
    with pytest.raises(DataError):
        as_tensor([1, 2, 3], shape=(2, 2))
    a, b = split_rngs(5, 2)
    assert a.random() != b.random()
    assert derive_seed(1, 2) == derive_seed(1, 2) != derive_seed(2, 1)
    assert make_rng(3).random() == make_rng(3).random()


def test_numeric_grad_of_quadratic():
    x = np.array([1.0, -2.0, 0.5])
    g = numeric_grad(lambda: float(np.sum(x ** 2)), x)
    np.testing.assert_allclose(g, 2 * x, rtol=1e-8)
    assert relative_error(np.array([1.0]), np.array([1.0])) == 0.0
    assert relative_error(np.array([0.0]), np.array([0.0])) == 0.0


def _layer_cases():
    rng = np.random.default_rng(0)

    def biased(layer):
        layer.astype(np.float64)
        if "b" in layer.params:
            layer.params["b"][...] = rng.normal(0, 0.1, layer.params["b"].shape)
        return layer

    return [
        ("conv2d", biased(Conv(2, 3, 3, 2, rng=rng)), (2, 2, 5, 5), "eval"),
        ("conv2d_1x1", biased(Conv(3, 1, 1, 2, pad=0, rng=rng)), (2, 3, 4, 4), "eval"),
        ("conv3d", biased(Conv(2, 2, 3, 3, rng=rng)), (1, 2, 4, 4, 4), "eval"),
        ("dense", biased(Dense(5, 3, rng=rng)), (4, 5), "eval"),
        ("relu", ReLU(), (3, 7), "eval"),
        ("dropout", Dropout(0.5), (3, 7), "train"),
        ("maxpool2d", MaxPool(2, 2), (1, 2, 4, 6), "eval"),
        ("maxpool3d", MaxPool(2, 3), (1, 2, 4, 4, 4), "eval"),
        ("upsample2d", Upsample(2, 2), (1, 2, 3, 3), "eval"),
        ("upsample3d", Upsample(2, 3), (1, 1, 2, 2, 2), "eval"),
        ("flatten", Flatten(), (2, 3, 2, 2), "eval"),
        ("sequential", Sequential([biased(Conv(1, 2, 3, 2, rng=rng)), ReLU(), Dropout(0.3), MaxPool(2, 2)]),
         (2, 1, 4, 4), "mc"),
    ]


@pytest.mark.parametrize("name,layer,shape,mode", _layer_cases(), ids=lambda v: v if isinstance(v, str) else "")
def test_layer_gradients(name, layer, shape, mode):
    rng = np.random.default_rng(7)
    x = rng.standard_normal(shape)
    if name.startswith("maxpool") or name == "relu":
        # distinct values spaced far beyond the difference step: no kink or tie is crossed
        x = (rng.permutation(x.size).reshape(shape) - x.size / 2 + 0.25) * 0.1
    assert check_layer(layer, x, mode=mode, seed=3) <= 1e-6


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 3), st.integers(1, 3), st.integers(3, 6), st.integers(0, 2**31))
def test_conv_linear_in_input(c, o, n, seed):
    rng = np.random.default_rng(seed)
    w = rng.standard_normal((o, c, 3, 3))
    b = np.zeros(o)
    x1, x2 = rng.standard_normal((2, c, n, n))
    lhs = conv2d_forward(2 * x1 - x2, w, b, 1, 1)
    rhs = 2 * conv2d_forward(x1, w, b, 1, 1) - conv2d_forward(x2, w, b, 1, 1)
    np.testing.assert_allclose(lhs, rhs, atol=1e-10)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 3), st.integers(2, 8), st.integers(0, 2**31))
def test_conv_backward_is_adjoint(c, n, seed):
    # <conv(x), g> == <x, conv^T(g)> for the input gradient
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((1, c, n, n))
    w = rng.standard_normal((2, c, 3, 3))
    out, cache = ops.conv_forward(x, w, np.zeros(2), 1, 1)
    g = rng.standard_normal(out.shape)
    dx, _, _ = ops.conv_backward(g, cache)
    assert np.sum(out * g) == pytest.approx(np.sum(x * dx), rel=1e-9, abs=1e-9)
