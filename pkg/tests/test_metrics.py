"""
Tests for AUROC, average precision, PRO and report assembly
"""

import numpy as np
import pytest
from scipy import ndimage
from sklearn.metrics import average_precision_score, roc_auc_score

from snarm.core.exceptions import ConfigError, DataError
from snarm.core.metrics import (
    EvalRecord,
    auroc,
    average_precision,
    evaluate,
    label_components,
    pro,
    pro_curve,
)
from snarm.schemas.config import MetricsConfig


def _two_component_case():
    mask = np.zeros((10, 10), dtype=np.uint8)
    mask[1:3, 1:3] = 1
    mask[6:8, 6:8] = 1
    scores = np.zeros((10, 10))
    scores[mask == 0] = np.linspace(0.02, 0.98, int((mask == 0).sum()))
    scores[1:3, 1:3] = 1.0
    scores[6:8, 6:8] = 0.0
    return scores, mask


# AUROC / AP


def test_auroc_example():
    assert auroc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == pytest.approx(0.75)


def test_average_precision_example():
    assert average_precision([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == pytest.approx(5 / 6)


def test_average_precision_single_positive_ranked_last():
    scores = np.linspace(1.0, 0.1, 10)
    labels = np.zeros(10, dtype=int)
    labels[-1] = 1
    assert average_precision(scores, labels) == pytest.approx(0.1)


def test_auroc_ties_count_half():
    assert auroc([0.5, 0.5], [0, 1]) == pytest.approx(0.5)


@pytest.mark.parametrize("seed", range(200))
def test_metrics_agree_with_sklearn(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 60))
    labels = rng.integers(0, 2, size=n)
    labels[0], labels[1] = 0, 1
    scores = np.round(rng.random(n), int(rng.integers(1, 4)))
    assert auroc(scores, labels) == pytest.approx(roc_auc_score(labels, scores), abs=1e-12)
    assert average_precision(scores, labels) == pytest.approx(average_precision_score(labels, scores), abs=1e-12)


def test_auroc_is_rank_based(rng):
    scores = rng.normal(size=80)
    labels = rng.integers(0, 2, size=80)
    labels[:2] = [0, 1]
    base = auroc(scores, labels)
    assert auroc(np.exp(scores), labels) == pytest.approx(base)
    assert auroc(3 * scores + 7, labels) == pytest.approx(base)
    assert base + auroc(-scores, labels) == pytest.approx(1.0)


@pytest.mark.parametrize("seed", range(200))
def test_ap_and_pro_survive_monotone_transforms(seed):
    rng = np.random.default_rng(900 + seed)
    h, w = int(rng.integers(3, 10)), int(rng.integers(3, 10))
    mask = (rng.random((h, w)) < 0.3).astype(np.uint8)
    mask.flat[0], mask.flat[-1] = 1, 0
    scores = np.round(rng.random((h, w)), 2)
    base_ap, base_pro = average_precision(scores, mask), pro([scores], [mask])
    for transformed in (np.exp(scores), 3 * scores + 7, scores**3):
        assert average_precision(transformed, mask) == pytest.approx(base_ap, abs=1e-12)
        assert pro([transformed], [mask]) == pytest.approx(base_pro, abs=1e-9)


def test_single_class_inputs_rejected():
    with pytest.raises(DataError):
        auroc([0.1, 0.2], [1, 1])
    with pytest.raises(DataError):
        auroc([0.1, 0.2], [0, 0])
    with pytest.raises(DataError):
        average_precision([0.1, 0.2], [0, 0])
    with pytest.raises(DataError):
        auroc([0.1, 0.2], [0, 2])


# PRO


def test_pro_perfect_detector():
    mask = np.zeros((8, 8), dtype=np.uint8)
    mask[2:5, 3:6] = 1
    assert pro([mask.astype(float)], [mask], fpr_limit=0.3) == pytest.approx(1.0)


def test_pro_one_component_missed():
    scores, mask = _two_component_case()
    assert pro([scores], [mask], fpr_limit=0.3) == pytest.approx(0.5)


def test_pro_constant_detector():
    mask = np.zeros((6, 6), dtype=np.uint8)
    mask[1:3, 1:3] = 1
    assert pro([np.full((6, 6), 0.5)], [mask], fpr_limit=0.3) == pytest.approx(0.15)


@pytest.mark.parametrize("seed", range(100))
def test_pro_of_random_detector(seed):
    rng = np.random.default_rng(seed)
    mask = np.zeros((48, 48), dtype=np.uint8)
    mask[16:32, 16:32] = 1
    assert pro([rng.random((48, 48))], [mask], fpr_limit=0.3) == pytest.approx(0.15, abs=0.05)


def test_pro_curve_is_monotone(rng):
    masks, maps = [], []
    for _ in range(3):
        mask = np.zeros((12, 12), dtype=np.uint8)
        top = int(rng.integers(0, 6))
        mask[top : top + 4, 2:7] = 1
        masks.append(mask)
        maps.append(rng.random((12, 12)) + mask * 0.3)
    fpr, values = pro_curve(maps, masks)
    assert fpr[0] == 0.0 and values[0] == 0.0
    assert np.all(np.diff(fpr) >= 0)
    assert np.all(np.diff(values) >= -1e-12)
    assert fpr[-1] == pytest.approx(1.0)
    assert values[-1] == pytest.approx(1.0)


def test_pro_threshold_budget_is_close_to_exact(rng):
    mask = np.zeros((20, 20), dtype=np.uint8)
    mask[5:10, 5:12] = 1
    scores = rng.random((20, 20)) + 0.5 * mask
    exact = pro([scores], [mask])
    approx = pro([scores], [mask], max_thresholds=200)
    assert approx == pytest.approx(exact, abs=0.05)


def test_pro_rejects_bad_limit_and_empty_masks():
    mask = np.zeros((4, 4), dtype=np.uint8)
    mask[0, 0] = 1
    for limit in (0.0, 1.5):
        with pytest.raises(ConfigError):
            pro([np.zeros((4, 4))], [mask], fpr_limit=limit)
    with pytest.raises(DataError):
        pro([np.zeros((4, 4))], [np.zeros((4, 4), dtype=np.uint8)])


def test_component_connectivity():
    mask = np.array([[1, 0], [0, 1]], dtype=np.uint8)
    assert label_components(mask, 8)[1] == 1
    assert label_components(mask, 4)[1] == 2
    with pytest.raises(ConfigError):
        label_components(mask, 6)


# evaluate


def _records(score_fn, rng):
    records = []
    for i in range(6):
        label = i % 2
        mask = np.zeros((8, 8), dtype=np.uint8)
        if label:
            top = int(rng.integers(0, 5))
            mask[top : top + 3, 2:5] = 1
        values = score_fn(mask)
        records.append(EvalRecord(float(values.max()), values, label, mask, "cat_a" if i < 4 else "cat_b"))
    return records


def test_evaluate_perfect_detector(rng):
    report = evaluate(_records(lambda m: m.astype(np.float64), rng))
    for key in ("I_AUROC", "P_AUROC", "P_AP", "PRO", "mAD"):
        assert getattr(report, key) == pytest.approx(1.0)
    assert report.num_images == 6
    assert sorted(report.per_category) == ["cat_a", "cat_b"]


def test_evaluate_constant_detector(rng):
    records = _records(lambda m: np.full(m.shape, 0.5), rng)
    report = evaluate(records)
    positives = sum(int(r.gt_mask.sum()) for r in records)
    assert report.I_AUROC == pytest.approx(0.5)
    assert report.P_AUROC == pytest.approx(0.5)
    assert report.P_AP == pytest.approx(positives / (6 * 64))
    assert report.PRO == pytest.approx(0.15)


def test_evaluate_excludes_missing_masks_from_pixel_metrics(rng):
    records = _records(lambda m: m.astype(np.float64), rng)
    records.append(EvalRecord(0.0, np.zeros((8, 8)), 1, np.zeros((8, 8), dtype=np.uint8), "cat_b", mask_missing=True))
    report = evaluate(records, MetricsConfig())
    assert report.P_AUROC == pytest.approx(1.0)
    assert report.I_AUROC < 1.0


def test_evaluate_without_anomalous_pixels_skips_pixel_metrics():
    records = [
        EvalRecord(0.1, np.zeros((4, 4)), 0, np.zeros((4, 4), dtype=np.uint8)),
        EvalRecord(0.9, np.zeros((4, 4)), 1, np.zeros((4, 4), dtype=np.uint8), mask_missing=True),
    ]
    report = evaluate(records)
    assert report.P_AUROC is None and report.PRO is None
    assert report.mAD == pytest.approx(1.0)


def test_eval_record_validation():
    with pytest.raises(DataError):
        EvalRecord(0.5, np.zeros((2, 2)), 0, np.ones((2, 2), dtype=np.uint8))
    with pytest.raises(DataError):
        EvalRecord(0.5, np.zeros((2, 2)), 1, np.ones((3, 3), dtype=np.uint8))


# brute-force threshold enumeration


def _auroc_pairs(scores, labels):
    pos, neg = scores[labels == 1], scores[labels == 0]
    wins = (pos[:, None] > neg[None, :]).sum() + 0.5 * (pos[:, None] == neg[None, :]).sum()
    return wins / (len(pos) * len(neg))


def _pro_enumerated(scores, mask, limit):
    components, count = ndimage.label(mask, structure=np.ones((3, 3)))
    neg = mask == 0
    points = [(0.0, 0.0)]
    for t in np.unique(scores)[::-1]:
        pred = scores >= t
        overlap = np.mean([pred[components == c].mean() for c in range(1, count + 1)])
        points.append((pred[neg].sum() / neg.sum(), overlap))
    area = 0.0
    for (x0, y0), (x1, y1) in zip(points, points[1:]):
        if x0 >= limit:
            break
        if x1 > limit:
            y1 = y0 + (y1 - y0) * (limit - x0) / (x1 - x0)
            x1 = limit
        area += (x1 - x0) * (y0 + y1) / 2
    return area / limit


@pytest.mark.parametrize("seed", range(200))
def test_metrics_agree_with_enumeration(seed):
    rng = np.random.default_rng(500 + seed)
    h, w = int(rng.integers(3, 9)), int(rng.integers(3, 9))
    mask = (rng.random((h, w)) < 0.3).astype(np.uint8)
    mask.flat[0], mask.flat[-1] = 1, 0
    scores = np.round(rng.random((h, w)) + 0.3 * mask, 2)

    assert auroc(scores, mask) == pytest.approx(_auroc_pairs(scores.ravel(), mask.ravel()), abs=1e-9)
    assert pro([scores], [mask], fpr_limit=0.3) == pytest.approx(_pro_enumerated(scores, mask, 0.3), abs=1e-9)
