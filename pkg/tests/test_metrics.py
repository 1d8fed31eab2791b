import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from emvfm.metrics import (
    EPSILON,
    MetricAccumulator,
    finalize,
    foreground_iou,
    format_mean_std,
    macro_average,
    mean_std,
    update,
    write_metrics,
)


def brute_iou(preds, gts, eps=1e-7):
    p = np.concatenate([np.ravel(x) for x in preds]) > 0
    g = np.concatenate([np.ravel(x) for x in gts]) > 0
    return np.sum(p & g) / (np.sum(p | g) + eps)


def _masks(fg_pred, fg_gt, n=400):
    pred = np.zeros(n, np.uint8)
    gt = np.zeros(n, np.uint8)
    pred[list(fg_pred)] = 1
    gt[list(fg_gt)] = 1
    return pred, gt


def test_update_examples():
    acc = MetricAccumulator()
    pred, gt = _masks(range(100), range(100))
    update(acc, pred, gt)
    assert (acc.intersection_px, acc.union_px) == (100, 100)
    acc = MetricAccumulator()
    pred, gt = _masks(range(100), range(50, 150))
    acc.update(pred, gt)
    assert (acc.intersection_px, acc.union_px) == (50, 150)
    acc = MetricAccumulator().update(np.zeros((4, 4)), np.zeros((4, 4)))
    assert (acc.intersection_px, acc.union_px) == (0, 0)


def test_finalize_examples():
    assert finalize(MetricAccumulator(100, 100)) == 100 / (100 + 1e-7)
    assert 0.9999999 < finalize(MetricAccumulator(100, 100)) < 1.0
    assert finalize(MetricAccumulator(50, 150)) == pytest.approx(1 / 3, abs=1e-9)
    assert finalize(MetricAccumulator(0, 0)) == 0.0
    assert EPSILON == 1e-7


def test_non_zero_labels_collapse_to_foreground():
    acc = MetricAccumulator().update(np.array([0, 2, 3, 0]), np.array([0, 1, 255, 7]))
    assert (acc.intersection_px, acc.union_px) == (2, 3)


def test_shape_mismatch():
    with pytest.raises(ValueError):
        MetricAccumulator().update(np.zeros((2, 2)), np.zeros(4))


def test_streaming_equals_one_shot_100_pairs(rng):
    preds, gts = [], []
    for _ in range(100):
        h, w = rng.integers(1, 60, size=2)
        preds.append((rng.random((h, w)) < rng.random()).astype(np.uint8))
        gts.append((rng.random((h, w)) < rng.random()).astype(np.uint8) * rng.integers(1, 4))
    oracle = brute_iou(preds, gts)
    for _ in range(20):
        order = rng.permutation(100)
        cuts = np.sort(rng.choice(np.arange(1, 100), size=rng.integers(0, 10), replace=False))
        chunks = np.split(order, cuts)
        parts = []
        for chunk in chunks:
            acc = MetricAccumulator()
            for i in chunk:
                acc.update(preds[i], gts[i])
            parts.append(acc)
        total = sum(parts[1:], parts[0])
        assert abs(total.finalize() - oracle) <= 1e-12


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.integers(1, 20), st.integers(1, 20), st.integers(0, 2**32 - 1)), min_size=1, max_size=12))
def test_streaming_property(shapes):
    preds, gts = [], []
    for h, w, seed in shapes:
        r = np.random.default_rng(seed)
        preds.append(r.integers(0, 2, (h, w)))
        gts.append(r.integers(0, 2, (h, w)))
    assert abs(foreground_iou(preds, gts) - brute_iou(preds, gts)) <= 1e-12
    assert abs(foreground_iou(preds[::-1], gts[::-1]) - brute_iou(preds, gts)) <= 1e-12


@settings(max_examples=50, deadline=None)
@given(*[st.tuples(st.integers(0, 10**9), st.integers(0, 10**9)) for _ in range(3)])
def test_merge_associative_commutative(a, b, c):
    acc = [MetricAccumulator(min(x), max(x)) for x in (a, b, c)]
    left = (acc[0] + acc[1]) + acc[2]
    right = acc[0] + (acc[1] + acc[2])
    assert (left.intersection_px, left.union_px) == (right.intersection_px, right.union_px)
    ab, ba = acc[0] + acc[1], acc[1] + acc[0]
    assert (ab.intersection_px, ab.union_px) == (ba.intersection_px, ba.union_px)


def test_merge_refuses_different_datasets():
    with pytest.raises(ValueError):
        MetricAccumulator(dataset_id="LUCCHI") + MetricAccumulator(dataset_id="VNC")


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_monotonicity(seed):
    r = np.random.default_rng(seed)
    pred, gt = r.integers(0, 2, (8, 8)), r.integers(0, 2, (8, 8))
    acc = MetricAccumulator().update(pred, gt)
    base = acc.finalize()
    perfect = r.integers(0, 2, (5, 5))
    up = MetricAccumulator(acc.intersection_px, acc.union_px).update(perfect, perfect)
    assert up.finalize() >= base - 1e-15
    g2 = r.integers(0, 2, (5, 5))
    down = MetricAccumulator(acc.intersection_px, acc.union_px).update(1 - g2, g2)
    assert down.finalize() <= base + 1e-15
    assert acc.intersection_px <= acc.union_px


def test_dataset_level_differs_from_mean_of_images():
    # one large well-segmented slice and one tiny badly-segmented slice
    p1, g1 = _masks(range(300), range(300))
    p2, g2 = _masks([0], [1])
    dataset_level = foreground_iou([p1, p2], [g1, g2])
    per_image = np.mean([foreground_iou([p1], [g1]), foreground_iou([p2], [g2])])
    assert dataset_level == pytest.approx(300 / 302, abs=1e-6)
    assert per_image == pytest.approx(0.5, abs=1e-6)
    assert dataset_level - per_image > 0.4


def test_macro_examples():
    assert macro_average({"LUCCHI": 0.007, "VNC": 0.661}) == pytest.approx(0.334, abs=1e-12)
    balanced = macro_average([0.019, 0.732])
    assert balanced == pytest.approx(0.3755, abs=1e-12)
    assert abs(balanced - 0.376) <= 5e-4 + 1e-12
    assert macro_average([0.42]) == 0.42
    with pytest.raises(ValueError):
        macro_average([])


def test_mean_std_uses_sample_std():
    m, s = mean_std([0.1, 0.2, 0.3, 0.4, 0.5])
    assert m == pytest.approx(0.3)
    assert s == pytest.approx(np.sqrt(0.025))
    assert mean_std([0.5]) == (0.5, 0.0)
    assert format_mean_std([0.5, 0.7]) == "0.600 ± 0.141"


def test_write_metrics(tmp_path):
    path = write_metrics(tmp_path, {"LUCCHI": 0.8, "VNC": 0.6}, "fp", 3)
    data = json.loads(path.read_text())
    assert path.name == "metrics.json"
    assert data["iou_fg"] == {"LUCCHI": 0.8, "VNC": 0.6}
    assert data["macro_iou_fg"] == pytest.approx(0.7)
    assert (data["fingerprint"], data["seed"]) == ("fp", 3)


def test_large_counts_stay_exact():
    acc = MetricAccumulator()
    big = np.ones(1024 * 768, np.uint8)
    for _ in range(165):
        acc.update(big, big)
    assert acc.intersection_px == acc.union_px == 165 * 1024 * 768
    assert isinstance(acc.intersection_px, int)
