from __future__ import annotations

import numpy as np
import numpy.testing as npt
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from egoflow import tensor_nn as nn
from egoflow.errors import LabelError, ShapeError


def _conv_case(rng, dims=(6, 5, 8), kernel=(3, 2, 4), stride=(2, 1, 2), k=2):
    x = rng.standard_normal(dims)
    spec = nn.ConvSpec3D(rng.standard_normal((k,) + kernel), rng.standard_normal(k), stride)
    return x, spec


def test_output_dims():
    assert nn.output_dims((32, 32, 120), (17, 17, 20), (2, 2, 4)) == (8, 8, 26)
    assert nn.output_dims((8, 8, 780), (2, 2, 13), (2, 2, 13)) == (4, 4, 60)
    with pytest.raises(ShapeError):
        nn.output_dims((4, 4, 4), (5, 1, 1), (1, 1, 1))


@pytest.mark.parametrize("method", ["direct", "fft"])
def test_conv3d_matches_oracle(rng, method):
    for _ in range(5):
        x, spec = _conv_case(rng)
        out = nn.conv3d_forward(x, spec, method=method)
        ref, scale = oracles.conv3d(x, spec.weights, spec.biases, spec.stride)
        oracles.assert_rel(out, ref, scale, 1e-12 if method == "direct" else 1e-11)


def test_conv3d_batch_equals_loop(rng):
    xs = rng.standard_normal((3, 6, 5, 8))
    _, spec = _conv_case(rng)
    batch = nn.conv3d_forward(xs, spec)
    for i in range(3):
        npt.assert_array_equal(batch[i], nn.conv3d_forward(xs[i], spec))


def test_conv3d_backward_finite_differences(rng):
    x, spec = _conv_case(rng, dims=(5, 4, 6), kernel=(2, 2, 3), stride=(1, 2, 1))
    g = rng.standard_normal(nn.conv3d_forward(x, spec).shape)

    def loss():
        return float(np.sum(nn.conv3d_forward(x, spec) * g))

    dw, db, dx = nn.conv3d_backward(x, spec, g)
    assert oracles.rel_error(dw, oracles.numeric_grad(loss, spec.weights)) < 1e-6
    assert oracles.rel_error(db, oracles.numeric_grad(loss, spec.biases)) < 1e-6
    assert oracles.rel_error(dx, oracles.numeric_grad(loss, x)) < 1e-6


@pytest.mark.parametrize(
    "dims,kernel,stride",
    [((32, 32, 120), (17, 17, 20), (2, 2, 4)), ((9, 8, 14), (3, 4, 5), (2, 1, 3)), ((8, 8, 12), (3, 3, 4), (1, 1, 2))],
)
def test_fft_plan_matches_direct(rng, dims, kernel, stride):
    x = rng.standard_normal((2,) + dims)
    spec = nn.ConvSpec3D(rng.standard_normal((3,) + kernel), rng.standard_normal(3), stride)
    plan = nn.FFTConv3D(dims, kernel, stride)
    direct = nn.conv3d_forward(x, spec)
    npt.assert_allclose(plan.forward(x, spec), direct, rtol=0, atol=1e-10 * np.abs(direct).max())
    g = rng.standard_normal(direct.shape)
    for a, b in zip(plan.backward(x, spec, g, need_input_grad=True), nn.conv3d_backward(x, spec, g)):
        npt.assert_allclose(a, b, rtol=0, atol=1e-10 * np.abs(b).max())


def test_fft_single_precision_close(rng):
    dims, kernel, stride = (16, 16, 24), (5, 5, 8), (2, 2, 4)
    x = rng.standard_normal((2,) + dims)
    spec = nn.ConvSpec3D(rng.standard_normal((2,) + kernel), np.zeros(2), stride)
    ref = nn.FFTConv3D(dims, kernel, stride).forward(x, spec)
    out = nn.FFTConv3D(dims, kernel, stride, np.float32).forward(x, spec)
    assert out.dtype == np.float64
    assert np.abs(out - ref).max() < 1e-5 * np.abs(ref).max()


def test_conv2d_matches_oracle(rng):
    x = rng.standard_normal((5, 4, 3))
    spec = nn.ConvSpec3D(rng.standard_normal((2, 3, 2, 3)), rng.standard_normal(2))
    ref, scale = oracles.conv2d(x, spec.weights, spec.biases)
    oracles.assert_rel(nn.conv2d_forward(x, spec), ref, scale)


def test_conv2d_channel_mismatch():
    with pytest.raises(ShapeError):
        nn.conv2d_forward(np.zeros((4, 4, 3)), nn.ConvSpec3D(np.zeros((1, 2, 2, 2)), np.zeros(1)))


def test_conv2d_backward_finite_differences(rng):
    x = rng.standard_normal((4, 4, 3))
    spec = nn.ConvSpec3D(rng.standard_normal((2, 2, 2, 3)), rng.standard_normal(2))
    g = rng.standard_normal((3, 3, 2))

    def loss():
        return float(np.sum(nn.conv2d_forward(x, spec) * g))

    dw, db, dx = nn.conv2d_backward(x, spec, g)
    assert oracles.rel_error(dw, oracles.numeric_grad(loss, spec.weights)) < 1e-6
    assert oracles.rel_error(db, oracles.numeric_grad(loss, spec.biases)) < 1e-6
    assert oracles.rel_error(dx, oracles.numeric_grad(loss, x)) < 1e-6


def test_maxpool3d_matches_oracle(rng):
    x = rng.standard_normal((4, 6, 9))
    out, arg = nn.maxpool3d_forward(x, nn.PoolSpec3D((2, 3, 3), (2, 3, 3)))
    ref, ref_arg = oracles.maxpool3d(x, (2, 3, 3), (2, 3, 3))
    npt.assert_array_equal(out, ref)
    npt.assert_array_equal(arg, ref_arg)


def test_maxpool3d_tie_goes_to_first():
    x = np.ones((2, 2, 2))
    out, arg = nn.maxpool3d_forward(x, nn.PoolSpec3D((2, 2, 2), (2, 2, 2)))
    assert out[0, 0, 0] == 1.0 and arg[0, 0, 0] == 0


def test_maxpool3d_strict_tiling():
    with pytest.raises(ShapeError):
        nn.maxpool3d_forward(np.zeros((5, 4, 4)), nn.PoolSpec3D((2, 2, 2), (2, 2, 2)))


def test_maxpool3d_backward_routes_to_argmax(rng):
    x = rng.standard_normal((4, 4, 6))
    spec = nn.PoolSpec3D((2, 2, 3), (2, 2, 3))
    out, arg = nn.maxpool3d_forward(x, spec)
    g = rng.standard_normal(out.shape)

    def loss():
        return float(np.sum(nn.maxpool3d_forward(x, spec)[0] * g))

    dx = nn.maxpool3d_backward(arg, g, x.shape)
    npt.assert_allclose(dx, oracles.numeric_grad(loss, x), atol=1e-8)
    assert np.count_nonzero(dx) == g.size


def test_maxpool2d_matches_oracle(rng):
    x = rng.standard_normal((4, 6, 3))
    out, _ = nn.maxpool2d_forward(x)
    npt.assert_array_equal(out, oracles.maxpool2d(x, (2, 2), (2, 2)))


def test_dense_and_softmax(rng):
    x = rng.standard_normal(7)
    spec = nn.DenseSpec(rng.standard_normal((4, 7)), rng.standard_normal(4))
    ref, scale = oracles.dense(x, spec.weights, spec.biases)
    oracles.assert_rel(nn.dense_forward(x, spec), ref, scale)
    z = rng.standard_normal(5) * 30
    npt.assert_allclose(nn.softmax(z), oracles.softmax(z), rtol=1e-12)


def test_dense_backward_finite_differences(rng):
    x = rng.standard_normal((3, 5))
    spec = nn.DenseSpec(rng.standard_normal((4, 5)), rng.standard_normal(4))
    g = rng.standard_normal((3, 4))

    def loss():
        return float(np.sum(nn.dense_forward(x, spec) * g))

    dw, db, dx = nn.dense_backward(x, spec, g)
    assert oracles.rel_error(dw, oracles.numeric_grad(loss, spec.weights)) < 1e-7
    assert oracles.rel_error(db, oracles.numeric_grad(loss, spec.biases)) < 1e-7
    assert oracles.rel_error(dx, oracles.numeric_grad(loss, x)) < 1e-7


def test_softmax_extreme_logits_are_stable():
    p = nn.softmax(np.array([1000.0, 0.0, -1000.0]))
    assert np.all(np.isfinite(p))
    npt.assert_allclose(p, [1.0, 0.0, 0.0])


@given(st.lists(st.floats(-50, 50), min_size=2, max_size=12))
def test_softmax_is_a_distribution(z):
    p = nn.softmax(np.array(z))
    assert np.all(p >= 0)
    assert abs(p.sum() - 1.0) <= 1e-12


def test_cross_entropy_gradient(rng):
    z = rng.standard_normal((4, 3))
    y = np.array([0, 2, 1, 2])
    _, grad = nn.cross_entropy(nn.softmax(z), y)

    def loss():
        return nn.cross_entropy(nn.softmax(z), y)[0]

    assert oracles.rel_error(grad, oracles.numeric_grad(loss, z)) < 1e-7


def test_cross_entropy_rejects_bad_labels():
    with pytest.raises(LabelError):
        nn.cross_entropy(np.array([[0.5, 0.5]]), [2])
    with pytest.raises(LabelError):
        nn.cross_entropy(np.array([[0.5, 0.5]]), [0, 1])


def test_relu_subgradient_at_zero():
    npt.assert_array_equal(nn.relu_backward(np.array([-1.0, 0.0, 2.0]), np.ones(3)), [0.0, 0.0, 1.0])


def test_xavier_bounds_and_determinism():
    w = nn.xavier_init(540, 900, 3, (100, 3, 3, 60))
    a = np.sqrt(6.0 / 1440)
    assert w.shape == (100, 3, 3, 60)
    assert np.abs(w).max() <= a
    assert np.abs(w).max() > 0.95 * a
    npt.assert_array_equal(w, nn.xavier_init(540, 900, 3, (100, 3, 3, 60)))


def test_sgd_step_in_place():
    params = {"w": np.ones(3)}
    nn.sgd_step(params, {"w": np.array([1.0, 2.0, 3.0])}, 0.5)
    npt.assert_array_equal(params["w"], [0.5, 0.0, -0.5])
    with pytest.raises(ShapeError):
        nn.sgd_step(params, {"w": np.ones(2)}, 0.1)


@settings(max_examples=25, deadline=None)
@given(
    st.integers(3, 7), st.integers(3, 7), st.integers(4, 9),
    st.integers(1, 3), st.integers(1, 3), st.integers(1, 4),
    st.integers(1, 2), st.integers(1, 2), st.integers(1, 3),
    st.integers(0, 2**31 - 1),
)
def test_conv3d_fft_equals_direct_property(r, c, d, kr, kc, kd, sr, sc, sd, seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, r, c, d))
    spec = nn.ConvSpec3D(rng.standard_normal((2, kr, kc, kd)), rng.standard_normal(2), (sr, sc, sd))
    direct = nn.conv3d_forward(x, spec)
    npt.assert_allclose(nn.conv3d_forward(x, spec, method="fft"), direct, atol=1e-11 * (1 + np.abs(direct).max()))
