import numpy as np
import pytest

from borderdet.boxes import combine_boxes, combine_scores, decode_coarse, decode_field, encode_offsets
from borderdet.config import Config
from borderdet.detector import BorderDet, final_boxes, postprocess
from borderdet.train import compute_loss
from borderdet.verify import GRAD_TOLERANCE, gradient_suite, head_problem, roundtrip_error, small_head_config


@pytest.fixture(scope="module")
def images():
    return np.random.default_rng(0).normal(size=(2, 3, 64, 64)).astype(np.float32)


def test_output_shapes(images):
    model = BorderDet(Config())
    out, _ = model.forward(images)
    assert out.coarse_cls_logits.shape == (2, 2, 8, 8)
    assert out.border_cls_logits.shape == (2, 2, 8, 8)
    assert out.coarse_reg.shape == out.border_offsets.shape == out.coarse_boxes.shape == (2, 4, 8, 8)
    assert np.all(out.coarse_reg >= 0)
    assert np.all((out.coarse_boxes >= 0) & (out.coarse_boxes <= 64))


def test_zero_border_heads_reduce_to_coarse(images):
    model = BorderDet(Config(score_thresh=0.0))
    model.zero_border_heads()
    out, _ = model.forward(images)
    assert np.all(out.border_cls_logits == 0) and np.all(out.border_offsets == 0)
    cfg = model.cfg
    assert np.array_equal(final_boxes(out, cfg, "refined"), final_boxes(out, cfg, "coarse"))
    coarse = postprocess(out, cfg, "coarse")
    refined = postprocess(out, cfg, "refined")
    for c, r in zip(coarse, refined):
        assert len(c) > 0
        assert np.array_equal(c.boxes, r.boxes) and np.array_equal(c.labels, r.labels)
        np.testing.assert_array_equal(r.scores, c.scores * 0.5)


def test_prior_bias_initialization():
    model = BorderDet(Config())
    np.testing.assert_allclose(model.cls_head.bias, -np.log(99.0), rtol=1e-6)


def test_decode_coarse_examples():
    np.testing.assert_array_equal(decode_coarse((0, 0), (4, 4, 4, 4), 8), [0, 0, 8, 8])
    np.testing.assert_array_equal(decode_coarse((1, 2), (20, 1, 3, 2), 8, image_size=64), [0, 11, 23, 14])
    # negative distances clamp to zero extent
    np.testing.assert_array_equal(decode_coarse((0, 0), (-3, -3, 4, 4), 8), [4, 4, 8, 8])


def test_decode_field_matches_scalar():
    rng = np.random.default_rng(1)
    dist = rng.uniform(-2, 30, size=(1, 4, 3, 5))
    field = decode_field(dist, 8, 32)
    for i in range(3):
        for j in range(5):
            np.testing.assert_allclose(field[0, :, i, j], decode_coarse((i, j), dist[0, :, i, j], 8, 32))


def test_offset_encoding_examples():
    coarse = np.array([0.0, 0.0, 10.0, 10.0])
    target = np.array([1.0, 1.0, 11.0, 11.0])
    delta = encode_offsets(coarse, target, 0.5)
    np.testing.assert_allclose(delta, [0.2, 0.2, 0.2, 0.2])
    np.testing.assert_allclose(combine_boxes(coarse, delta, 0.5), target)
    np.testing.assert_array_equal(combine_boxes(coarse, np.zeros(4)), coarse)


def test_offset_roundtrip_random():
    assert roundtrip_error(2000, seed=3) < 1e-9


def test_combine_scores():
    assert combine_scores(0.8, 0.5) == pytest.approx(0.4)
    np.testing.assert_array_equal(combine_scores(np.ones(3), np.zeros(3)), 0)


def test_predict_returns_bounded_detections(images):
    dets = BorderDet(Config(score_thresh=0.0)).predict(images)
    assert len(dets) == 2
    for d in dets:
        assert len(d) <= 100
        assert np.all(np.diff(d.scores) <= 0)
        assert np.all((d.boxes >= 0) & (d.boxes <= 64))


def test_astype_roundtrip(images):
    model = BorderDet(Config())
    wide = model.astype(np.float64)
    a, _ = model.forward(images)
    b, _ = wide.forward(images.astype(np.float64))
    np.testing.assert_allclose(a.coarse_cls_logits, b.coarse_cls_logits, atol=1e-4)


def test_end_to_end_gradient_f64():
    model, images, gts, boxes = head_problem()
    res, _, cache, _ = compute_loss(model, images, gts, boxes_override=boxes)
    assert res.n_pos_coarse > 0 and res.n_pos_border > 0
    suite = gradient_suite(head_entries=20)
    failing = [str(r) for r in suite.reports if not r.passed]
    assert not failing, failing
    assert suite.worst.max_rel_err < GRAD_TOLERANCE


def test_small_config_stride():
    assert small_head_config().stride == 8
