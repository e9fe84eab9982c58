import numpy as np
import pytest

from borderdet import layers
from borderdet.bam import BamParams, StaleCacheError, bam_backward, bam_forward
from borderdet.border_align import PoolConfig, border_align_forward
from borderdet.gradcheck import grad_check
from borderdet.tensor import LayerParams, ShapeError


def random_boxes(rng, nb, h, w, lo=-1.0, hi=6.0):
    a = rng.uniform(lo, hi, size=(nb, 2, h, w))
    return np.concatenate([a, a + rng.uniform(0, 4, size=(nb, 2, h, w))], axis=1)


@pytest.fixture
def setup():
    rng = np.random.default_rng(0)
    params = BamParams.init(rng, 3, np.float64)
    params.norm.weight[...] = rng.uniform(0.5, 1.5, size=15)
    params.norm.bias[...] = rng.normal(size=15)
    return rng, params


def test_zero_features_give_reduce_bias(setup):
    rng, params = setup
    params.reduce.bias[...] = [0.1, -0.2, 0.3]
    params.norm.bias[...] = 0.0
    out, _ = bam_forward(np.zeros((1, 3, 4, 4)), random_boxes(rng, 1, 4, 4), params)
    for c, v in enumerate([0.1, -0.2, 0.3]):
        assert np.all(out[0, c] == v)


def test_matches_stage_composition(setup):
    rng, params = setup
    feat = rng.normal(size=(2, 3, 5, 4))
    boxes = random_boxes(rng, 2, 5, 4)
    cfg = PoolConfig(6)
    out, _ = bam_forward(feat, boxes, params, cfg)
    e = layers.conv2d(feat, params.expand, padding=0)
    n = layers.instance_norm(e, params=params.norm)
    pooled, _ = border_align_forward(n, boxes, cfg)
    np.testing.assert_array_equal(out, layers.conv2d(pooled, params.reduce, padding=0))
    assert out.shape == feat.shape


def test_boxes_outside_map_are_finite(setup):
    rng, params = setup
    feat = rng.normal(size=(1, 3, 4, 4))
    out, _ = bam_forward(feat, random_boxes(rng, 1, 4, 4, lo=-40, hi=-20), params)
    assert np.all(np.isfinite(out))
    far, _ = bam_forward(feat, random_boxes(rng, 1, 4, 4, lo=50, hi=60), params)
    assert np.all(np.isfinite(far))


def test_rejects_mismatched_params():
    rng = np.random.default_rng(1)
    with pytest.raises(ShapeError):
        BamParams(layers.init_conv(rng, 3, 12, 1), layers.init_norm(12), layers.init_conv(rng, 12, 3, 1))


def test_gradcheck_input_and_params(setup):
    rng, params = setup
    feat = rng.normal(size=(2, 3, 4, 4))
    boxes = random_boxes(rng, 2, 4, 4)
    proj = rng.standard_normal(feat.shape)
    f = lambda: float(np.sum(bam_forward(feat, boxes, params, PoolConfig(5))[0] * proj))  # noqa: E731
    _, cache = bam_forward(feat, boxes, params, PoolConfig(5))
    g = bam_backward(proj, cache, params)
    assert grad_check(f, feat, g, 1e-6, "bam input").passed
    for name, p in params.named("bam").items():
        rep = grad_check(f, p.weight, p.grad_weight.copy(), 1e-6, name)
        assert rep.passed, rep


def test_param_grads_accumulate(setup):
    rng, params = setup
    feat = rng.normal(size=(1, 3, 4, 4))
    boxes = random_boxes(rng, 1, 4, 4)
    g1, g2 = rng.normal(size=(2, 1, 3, 4, 4))
    _, c1 = bam_forward(feat, boxes, params)
    bam_backward(g1, c1, params)
    first = params.expand.grad_weight.copy()
    _, c2 = bam_forward(feat, boxes, params)
    bam_backward(g2, c2, params)
    for p in params.named("x").values():
        p.zero_grad()
    _, c3 = bam_forward(feat, boxes, params)
    bam_backward(g1 + g2, c3, params)
    combined = params.expand.grad_weight.copy()
    assert not np.allclose(first, 0)
    # two backward passes sum to one pass with the summed gradient
    for p in params.named("x").values():
        p.zero_grad()
    for g in (g1, g2):
        _, c = bam_forward(feat, boxes, params)
        bam_backward(g, c, params)
    np.testing.assert_allclose(params.expand.grad_weight, combined, atol=1e-12)


def test_stale_cache_raises(setup):
    rng, params = setup
    feat = rng.normal(size=(1, 3, 3, 3))
    _, cache = bam_forward(feat, random_boxes(rng, 1, 3, 3), params)
    bam_backward(np.ones_like(feat), cache, params)
    with pytest.raises(StaleCacheError):
        bam_backward(np.ones_like(feat), cache, params)
    other = BamParams.init(rng, 3, np.float64)
    _, cache = bam_forward(feat, random_boxes(rng, 1, 3, 3), params)
    with pytest.raises(StaleCacheError):
        bam_backward(np.ones_like(feat), cache, other)


def test_layer_params_type():
    assert isinstance(BamParams.init(np.random.default_rng(0), 2).expand, LayerParams)
