import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from borderdet import layers
from borderdet.gradcheck import check_layer
from borderdet.tensor import (
    LayerParams, ShapeError, bilinear_sample, load_tensor, save_tensor, tensor_from_bytes, tensor_to_bytes,
)


def naive_conv(x, w, b, stride, pad):
    n, c, h, wd = x.shape
    o, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    out = np.zeros((n, o, ho, wo))
    for bi in range(n):
        for oc in range(o):
            for i in range(ho):
                for j in range(wo):
                    acc = b[oc]
                    for ic in range(c):
                        for di in range(k):
                            for dj in range(k):
                                acc += w[oc, ic, di, dj] * xp[bi, ic, i * stride + di, j * stride + dj]
                    out[bi, oc, i, j] = acc
    return out


# -- bilinear sampling -------------------------------------------------------

def test_bilinear_at_grid_point_is_exact():
    x = np.random.default_rng(0).normal(size=(1, 1, 5, 4))
    assert bilinear_sample(x, 0, 0, 2, 3) == x[0, 0, 3, 2]


def test_bilinear_constant_field():
    x = np.full((1, 2, 4, 4), 1.75)
    for px, py in [(0.3, 2.9), (-5, 1), (10, 10), (1.5, 0.5)]:
        assert bilinear_sample(x, 0, 1, px, py) == 1.75


def test_bilinear_hand_case():
    x = np.array([0.0, 1.0, 2.0, 3.0]).reshape(1, 1, 2, 2)
    assert bilinear_sample(x, 0, 0, 0.5, 0.5) == 1.5


def test_bilinear_clamps_outside():
    x = np.arange(12.0).reshape(1, 1, 3, 4)
    assert bilinear_sample(x, 0, 0, -3.0, -1.0) == x[0, 0, 0, 0]
    assert bilinear_sample(x, 0, 0, 9.0, 7.0) == x[0, 0, 2, 3]
    assert bilinear_sample(x, 0, 0, 1.25, 5.0) == pytest.approx(x[0, 0, 2, 1] + 0.25)


def test_bilinear_bad_index():
    with pytest.raises(IndexError):
        bilinear_sample(np.zeros((1, 2, 3, 3)), 0, 5, 0, 0)


@settings(max_examples=60, deadline=None)
@given(st.floats(0, 4), st.floats(0, 3), st.floats(0, 1))
def test_bilinear_linear_between_grid_lines(x, y, t):
    grid = np.random.default_rng(1).normal(size=(1, 1, 4, 5))
    xl = float(np.floor(min(x, 3.0)))
    a = bilinear_sample(grid, 0, 0, xl, y)
    b = bilinear_sample(grid, 0, 0, xl + 1, y)
    mid = bilinear_sample(grid, 0, 0, xl + t, y)
    assert mid == pytest.approx((1 - t) * a + t * b, abs=1e-12)


# -- convolution -------------------------------------------------------------

def test_conv_identity_1x1():
    x = np.random.default_rng(0).normal(size=(2, 3, 4, 4))
    p = LayerParams(np.eye(3).reshape(3, 3, 1, 1), np.zeros(3))
    assert np.array_equal(layers.conv2d(x, p, kernel=1, padding=0), x)


def test_conv_zero_weight_bias():
    x = np.random.default_rng(0).normal(size=(1, 2, 5, 5))
    p = LayerParams(np.zeros((3, 2, 3, 3)), np.array([1.0, -2.0, 0.5]))
    y = layers.conv2d(x, p, kernel=3, padding=1)
    assert y.shape == (1, 3, 5, 5)
    for c, beta in enumerate([1.0, -2.0, 0.5]):
        assert np.all(y[0, c] == beta)


@pytest.mark.parametrize("k,pad,stride", [(3, 1, 1), (3, 1, 2), (1, 0, 1), (1, 0, 2)])
def test_conv_matches_naive(k, pad, stride):
    rng = np.random.default_rng(k + stride)
    x = rng.normal(size=(1, 3, 4, 4))
    p = LayerParams(rng.normal(size=(2, 3, k, k)), rng.normal(size=2))
    got = layers.conv2d_forward(x, p, stride=stride, padding=pad)[0]
    np.testing.assert_allclose(got, naive_conv(x, p.weight, p.bias, stride, pad), rtol=1e-12, atol=1e-12)


def test_conv_channel_mismatch():
    with pytest.raises(ShapeError):
        layers.conv2d(np.zeros((1, 4, 3, 3)), LayerParams(np.zeros((2, 3, 1, 1)), np.zeros(2)))


def test_conv_is_linear():
    rng = np.random.default_rng(3)
    x, y = rng.normal(size=(2, 1, 2, 5, 5))
    p = LayerParams(rng.normal(size=(3, 2, 3, 3)), np.zeros(3))
    lhs = layers.conv2d(2.5 * x - 0.7 * y, p)
    rhs = 2.5 * layers.conv2d(x, p) - 0.7 * layers.conv2d(y, p)
    np.testing.assert_allclose(lhs, rhs, atol=1e-12)


@pytest.mark.parametrize("stride", [1, 2])
def test_conv_gradcheck(stride):
    rng = np.random.default_rng(4)
    x = rng.normal(size=(1, 2, 5, 5))
    p = LayerParams(rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3))
    state = {}

    def fwd(inp):
        y, state["c"] = layers.conv2d_forward(inp, p, stride=stride, padding=1)
        return y

    p.zero_grad()
    rep = check_layer(fwd, lambda g: layers.conv2d_backward(g, state["c"], p), x, tolerance=1e-6, name="conv2d")
    assert rep.passed, rep
    # parameter gradient: probe the weight through the same projection
    proj = np.random.default_rng(0).standard_normal(fwd(x).shape)
    p.zero_grad()
    layers.conv2d_backward(proj, state["c"], p)
    from borderdet.gradcheck import grad_check
    rep_w = grad_check(lambda: float(np.sum(fwd(x) * proj)), p.weight, p.grad_weight.copy(), 1e-6, "conv weight")
    assert rep_w.passed, rep_w


# -- instance norm -----------------------------------------------------------

def test_instance_norm_two_values():
    x = np.array([1.0, 3.0]).reshape(1, 1, 1, 2)
    y = layers.instance_norm(x)
    expected = np.array([-1.0, 1.0]) / np.sqrt(1.0 + layers.IN_EPS)
    np.testing.assert_allclose(y.ravel(), expected, rtol=1e-15)


def test_instance_norm_moments_and_invariances():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(2, 3, 4, 4)) * 3 + 1
    y = layers.instance_norm(x)
    np.testing.assert_allclose(y.mean(axis=(2, 3)), 0, atol=1e-12)
    np.testing.assert_allclose(y.var(axis=(2, 3)), 1, atol=1e-5)
    np.testing.assert_allclose(layers.instance_norm(x + 7.0), y, atol=1e-10)
    np.testing.assert_allclose(layers.instance_norm(x * 4.0 + 2.0), y, atol=1e-5)
    np.testing.assert_allclose(layers.instance_norm(y), y, atol=1e-5)


def test_instance_norm_degenerate_plane():
    with pytest.raises(layers.DegeneratePlaneError):
        layers.instance_norm(np.zeros((1, 2, 1, 1)))


def test_instance_norm_zero_plane_is_zero():
    y = layers.instance_norm(np.zeros((1, 2, 3, 3)), params=layers.init_norm(2, np.float64))
    assert np.all(y == 0)


def test_instance_norm_gradcheck():
    rng = np.random.default_rng(6)
    x = rng.normal(size=(2, 3, 3, 4))
    p = LayerParams(rng.normal(size=3), rng.normal(size=3))
    state = {}

    def fwd(inp):
        y, state["c"] = layers.instance_norm_forward(inp, p)
        return y

    rep = check_layer(fwd, lambda g: layers.instance_norm_backward(g, state["c"], p), x, 1e-6, "instance_norm")
    assert rep.passed, rep


# -- relu --------------------------------------------------------------------

def test_relu_values_and_mask():
    y, mask = layers.relu_forward(np.array([-1.0, 2.5, 3.0, -3.0]))
    assert list(y) == [0.0, 2.5, 3.0, 0.0]
    g = layers.relu_backward(np.ones(4), mask)
    assert list(g) == [0.0, 1.0, 1.0, 0.0]


def test_relu_gradcheck():
    rng = np.random.default_rng(7)
    x = rng.uniform(0.1, 1.0, size=(1, 2, 4, 4)) * rng.choice([-1, 1], size=(1, 2, 4, 4))
    state = {}

    def fwd(inp):
        y, state["m"] = layers.relu_forward(inp)
        return y

    rep = check_layer(fwd, lambda g: layers.relu_backward(g, state["m"]), x, 1e-8, "relu")
    assert rep.passed, rep


# -- TNS4 --------------------------------------------------------------------

def test_tns4_roundtrip(tmp_path):
    x = np.random.default_rng(8).normal(size=(1, 3, 5, 7)).astype(np.float32)
    save_tensor(tmp_path / "a.tns", x)
    raw = (tmp_path / "a.tns").read_bytes()
    assert raw[:4] == b"TNS4" and len(raw) == 20 + 4 * x.size
    assert np.array_equal(load_tensor(tmp_path / "a.tns"), x)


def test_tns4_rejects_bad_magic():
    data = bytearray(tensor_to_bytes(np.zeros((1, 1, 1, 1))))
    data[:4] = b"XXXX"
    with pytest.raises(ValueError):
        tensor_from_bytes(bytes(data))


def test_layer_params_grad_shapes():
    p = layers.init_conv(np.random.default_rng(0), 3, 4, 3)
    assert p.grad_weight.shape == p.weight.shape and p.grad_bias.shape == p.bias.shape
    bound = np.sqrt(3.0 * 2.0 / 27)
    assert np.abs(p.weight).max() <= bound
