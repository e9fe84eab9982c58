import json

import numpy as np
import pytest

from borderdet import bench
from borderdet.analysis import analyze_extreme_points, analyze_iou_histogram, border_distances
from borderdet.cli import main
from borderdet.config import Config
from borderdet.data import generate_synthetic_dataset
from borderdet.detector import BorderDet
from borderdet.evaluate import (
    Detections, InputError, evaluate, interpolated_ap, iou_bucket_counts, match_detections, nms, precision_recall,
)
from borderdet.targets import GroundTruth


def py_iou(a, b):
    iw = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    ih = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


def brute_nms(boxes, scores, labels, thr):
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    kept = []
    for i in order:
        if all(labels[k] != labels[i] or py_iou(boxes[k], boxes[i]) <= thr for k in kept):
            kept.append(i)
    return kept


def random_dets(rng, n):
    xy = rng.uniform(0, 40, size=(n, 2))
    wh = rng.uniform(2, 20, size=(n, 2))
    return Detections(np.concatenate([xy, xy + wh], 1), rng.uniform(size=n), rng.integers(0, 2, size=n))


def gt(boxes, classes=None):
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    classes = np.zeros(len(boxes), dtype=np.int64) if classes is None else np.asarray(classes)
    return GroundTruth(classes, boxes, np.zeros((len(boxes), 4, 2)))


# -- nms ---------------------------------------------------------------------

def test_nms_single_and_duplicate():
    one = Detections([[0, 0, 5, 5]], [0.3], [0])
    assert list(nms(one)) == [0]
    dup = Detections([[0, 0, 5, 5], [0, 0, 5, 5]], [0.8, 0.9], [0, 0])
    assert list(nms(dup)) == [1]
    other_class = Detections([[0, 0, 5, 5], [0, 0, 5, 5]], [0.8, 0.9], [0, 1])
    assert list(nms(other_class)) == [1, 0]


def test_nms_matches_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(200):
        d = random_dets(rng, int(rng.integers(1, 12)))
        assert list(nms(d, 0.6)) == brute_nms(d.boxes.tolist(), d.scores.tolist(), d.labels.tolist(), 0.6)


def test_nms_properties():
    rng = np.random.default_rng(1)
    d = random_dets(rng, 30)
    keep = nms(d)
    kept = d.take(keep)
    assert set(keep) <= set(range(30))
    assert np.all(np.diff(kept.scores) <= 0)
    assert len(nms(kept)) == len(kept)
    for i in range(len(kept)):
        for j in range(i + 1, len(kept)):
            if kept.labels[i] == kept.labels[j]:
                assert py_iou(kept.boxes[i], kept.boxes[j]) <= 0.6


def test_nms_ties_keep_lower_index():
    d = Detections([[0, 0, 5, 5], [0, 0, 5, 5]], [0.5, 0.5], [0, 0])
    assert list(nms(d)) == [0]


# -- evaluation --------------------------------------------------------------

def test_perfect_detections_score_one():
    gts = [gt([[0, 0, 10, 10], [20, 20, 30, 35]], [0, 1]), gt([[5, 5, 15, 25]], [1])]
    dets = [Detections(g.boxes, np.ones(len(g)), g.classes) for g in gts]
    rep = evaluate(dets, gts, 2)
    assert all(v == 1.0 for v in rep.ap.values()) and rep.mean_ap == 1.0


def test_empty_detections_score_zero():
    gts = [gt([[0, 0, 10, 10]])]
    rep = evaluate([Detections.from_list([])], gts, 1)
    assert all(v == 0.0 for v in rep.ap.values())


def test_hand_computed_pr_curve():
    # three objects; detections: hit A, duplicate of A, hit B; C is missed
    g = gt([[0, 0, 10, 10], [20, 0, 30, 10], [40, 0, 50, 10]])
    dets = Detections([[0, 0, 10, 10], [0, 0, 10, 10.5], [20, 0, 30, 10]], [0.9, 0.8, 0.7], [0, 0, 0])
    scores, matched, n_gt = match_detections([dets], [g], 0, 0.5)
    assert list(matched) == [True, False, True] and n_gt == 3
    prec, rec = precision_recall(scores, matched, n_gt)
    np.testing.assert_allclose(prec, [1, 0.5, 2 / 3])
    np.testing.assert_allclose(rec, [1 / 3, 1 / 3, 2 / 3])
    # envelope 1 for recall <= 1/3 (34 points), 2/3 up to 2/3 (33 points), then 0
    expected = (34 + 33 * (2 / 3)) / 101
    assert interpolated_ap(prec, rec) == pytest.approx(expected, rel=1e-15)
    assert evaluate([dets], [g], 1).ap[0.5] == pytest.approx(expected, rel=1e-15)


def test_evaluate_order_invariant():
    rng = np.random.default_rng(2)
    gts = [gt(rng.uniform(0, 30, size=(3, 2)).repeat(2, 1) + [0, 0, 10, 12]) for _ in range(3)]
    dets = [random_dets(rng, 8) for _ in range(3)]
    base = evaluate(dets, gts, 2)
    shuffled = [d.take(rng.permutation(len(d))) for d in dets]
    assert evaluate(shuffled, gts, 2).ap == base.ap


def test_evaluate_id_mismatch():
    with pytest.raises(InputError):
        evaluate([Detections.from_list([])], [gt([[0, 0, 1, 1]]), gt([[0, 0, 1, 1]])], 1)


def test_ap_monotone_in_threshold():
    rng = np.random.default_rng(3)
    gts = [gt([[5, 5, 25, 25], [30, 30, 50, 45]], [0, 1])]
    boxes = np.array(gts[0].boxes).repeat(4, 0) + rng.uniform(-4, 4, size=(8, 4))
    rep = evaluate([Detections(boxes, rng.uniform(size=8), np.repeat([0, 1], 4))], gts, 2)
    values = [rep.ap[t] for t in sorted(rep.ap)]
    assert all(a >= b for a, b in zip(values, values[1:]))
    assert all(0 <= v <= 1 for v in values)


def test_iou_buckets_perfect_predictor():
    gts = [gt([[0, 0, 10, 10], [20, 20, 40, 40]])]
    counts = iou_bucket_counts([gts[0].boxes], [gts[0].classes], gts)
    assert counts["0.9-1.0"] == 2 and sum(counts.values()) == 2


# -- analyses ----------------------------------------------------------------

def test_border_distance_geometry():
    boxes = np.array([[0.0, 0.0, 10.0, 20.0]])
    extremes = np.array([[[0, 10], [5, 0], [10, 10], [5, 20]]], dtype=float)
    at_extreme = extremes[:, :, None, :]
    np.testing.assert_allclose(border_distances(at_extreme, boxes, extremes), 0)
    corners = np.array([[[[0, 20]], [[10, 0]], [[10, 0]], [[0, 20]]]], dtype=float)
    np.testing.assert_allclose(border_distances(corners, boxes, extremes)[0, :, 0], [0.5, 0.5, -0.5, -0.5])


@pytest.fixture(scope="module")
def val_set():
    return generate_synthetic_dataset(8, 6)


def test_zero_offsets_give_identical_histograms(val_set):
    model = BorderDet(Config(score_thresh=0.0))
    model.zero_border_heads()
    hist = analyze_iou_histogram(model, val_set)
    assert hist["coarse"] == hist["refined"]


def test_extreme_analysis_runs_untrained(val_set):
    rep = analyze_extreme_points(BorderDet(Config(border_iou_thresh=0.0)), val_set)
    assert rep.counts.sum() == rep.distances.size
    assert np.isfinite(rep.mean)


# -- bench -------------------------------------------------------------------

def test_bench_rows_and_unknown_op(tmp_path):
    rows = bench.bench(["border_align_forward"], batches=(2,), channels=4, pool_sizes=(0, 10), repeats=2)
    assert {r.backend for r in rows} == {"numba", "numpy"}
    bench.write_csv(rows, tmp_path / "b.csv")
    assert (tmp_path / "b.csv").read_text().startswith("op,backend")
    with pytest.raises(KeyError):
        bench.bench(["no_such_op"])


def test_bench_work_scaling():
    t = {}
    for n in (0, 10):
        for batch in (4, 16):
            fn = bench._bench_border_forward(batch, 32, 8, n, False)
            t[n, batch] = bench.time_call(fn, repeats=5)
    assert t[0, 16] <= t[10, 16]
    assert t[10, 16] > t[10, 4]


# -- cli ---------------------------------------------------------------------

def test_cli_exit_codes(tmp_path, capsys):
    assert main(["bench", "--ops", "bogus"]) == 2
    assert main(["not-a-command"]) == 2
    assert main(["train", "--data", str(tmp_path / "missing"), "--out-dir", str(tmp_path / "r")]) == 2
    assert not (tmp_path / "r").exists()
    assert main(["--config", str(tmp_path / "none.json"), "verify"]) == 2


def test_cli_pipeline(tmp_path, capsys):
    cfg_path = tmp_path / "cfg.json"
    Config(iters=5, log_interval=0).save(cfg_path)
    data = tmp_path / "data"
    assert main(["generate-data", "--n-train", "8", "--n-val", "4", "--out-dir", str(data)]) == 0
    run = tmp_path / "run"
    assert main(["--config", str(cfg_path), "train", "--data", str(data / "train"), "--out-dir", str(run)]) == 0
    ckpt = str(run / "model.bdet")
    common = ["--checkpoint", ckpt, "--data", str(data / "val")]
    assert main(["--config", str(cfg_path), "eval", *common, "--out-dir", str(tmp_path / "ev")]) == 0
    report = json.loads((tmp_path / "ev" / "eval.json").read_text())
    assert set(report) == {"coarse", "refined"}
    assert main(["infer", "--checkpoint", ckpt, "--input", str(data / "val" / "img_00000.tns"),
                 "--out-dir", str(tmp_path / "inf")]) == 0
    assert len(json.loads((tmp_path / "inf" / "detections.json").read_text())) == 1
    for kind in ("extreme", "iou"):
        assert main(["analyze", kind, *common, "--out-dir", str(tmp_path / "an")]) == 0
    assert (tmp_path / "an" / "iou_histogram.csv").is_file()
    assert (tmp_path / "an" / "extreme_points.json").is_file()


def test_cli_verify_quick(tmp_path, capsys):
    assert main(["verify", "--instances", "30", "--out-dir", str(tmp_path)]) == 0
    assert json.loads((tmp_path / "verify.json").read_text())["passed"]
