"""
Threshold-independent evaluation metrics

I-AUROC, pixel AUROC, pixel average precision and the per-region overlap
(PRO) curve integrated up to a false-positive-rate limit. All curves are
exact (every distinct score is a threshold) unless a threshold budget is
given for PRO.
"""

import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.integrate import trapezoid
from scipy.stats import rankdata
from skimage import measure

from ..schemas.config import MetricsConfig
from ..schemas.report import EvaluationReport, MetricReport
from .exceptions import ConfigError, DataError

logger = logging.getLogger(__name__)

METRIC_KEYS = ("I_AUROC", "P_AUROC", "P_AP", "PRO")


@dataclass
class EvalRecord:
    """Scores and ground truth of one test image"""

    image_score: float
    pixel_scores: np.ndarray
    gt_label: int
    gt_mask: np.ndarray
    category: str = ""
    mask_missing: bool = False

    def __post_init__(self):
        if self.pixel_scores.shape != self.gt_mask.shape:
            raise DataError(f"pixel scores {self.pixel_scores.shape} and mask {self.gt_mask.shape} differ")
        if self.gt_label == 0 and self.gt_mask.any():
            raise DataError("a normal image cannot carry a non-empty mask")


def _binary(labels: Sequence) -> np.ndarray:
    y = np.asarray(labels).reshape(-1)
    if not np.isin(y, (0, 1)).all():
        raise DataError("labels must be binary")
    return y.astype(bool)


def auroc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """
    Area under the ROC curve as the normalised Mann-Whitney U statistic

    Ties between a positive and a negative count 1/2.
    """
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = _binary(labels)
    if s.shape != y.shape:
        raise DataError(f"{s.size} scores for {y.size} labels")
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DataError("AUROC needs both positive and negative samples")
    ranks = rankdata(s)
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def _tie_group_ends(sorted_desc: np.ndarray) -> np.ndarray:
    """Counts n such that the first n sorted scores are exactly those >= a distinct threshold"""
    change = np.flatnonzero(np.diff(sorted_desc)) + 1
    return np.append(change, sorted_desc.size)


def average_precision(scores: Sequence[float], labels: Sequence[int]) -> float:
    """
    Step-interpolated area under the precision-recall curve

    sum_k (R_k - R_{k-1}) * P_k over descending distinct thresholds
    """
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = _binary(labels)
    if s.shape != y.shape:
        raise DataError(f"{s.size} scores for {y.size} labels")
    total = int(y.sum())
    if total == 0:
        raise DataError("average precision needs at least one positive")

    order = np.argsort(-s, kind="stable")
    tp_cum = np.concatenate([[0], np.cumsum(y[order])])
    ends = _tie_group_ends(s[order])
    tp = tp_cum[ends]
    precision = tp / ends
    recall = tp / total
    ap = np.sum(np.diff(np.concatenate([[0.0], recall])) * precision)
    return float(np.clip(ap, 0.0, 1.0))


def label_components(mask: np.ndarray, connectivity: int = 8) -> Tuple[np.ndarray, int]:
    """Connected components of a binary mask (8- or 4-connectivity)"""
    if connectivity not in (4, 8):
        raise ConfigError(f"connectivity must be 4 or 8, got {connectivity}")
    labels, count = measure.label(np.asarray(mask).astype(bool), connectivity=2 if connectivity == 8 else 1, return_num=True)
    return labels, int(count)


def pro_curve(
    score_maps: Sequence[np.ndarray],
    masks: Sequence[np.ndarray],
    connectivity: int = 8,
    max_thresholds: Optional[int] = None,
) -> Tuple[np.ndarray, np.ndarray]:
    """
    (FPR, PRO) points for decreasing thresholds, starting at (0, 0)

    At threshold t a pixel is predicted anomalous when its score is >= t.
    PRO is the mean over all ground-truth components of the fraction of the
    component predicted anomalous; FPR is global over all normal pixels.
    """
    if len(score_maps) != len(masks) or not score_maps:
        raise DataError("PRO needs one mask per score map")

    scores, weights, negatives = [], [], []
    component_sizes: List[np.ndarray] = []
    per_pixel_labels = []
    for scores_map, mask in zip(score_maps, masks):
        if scores_map.shape != mask.shape:
            raise DataError(f"score map {scores_map.shape} and mask {mask.shape} differ")
        labels, count = label_components(mask, connectivity)
        per_pixel_labels.append(labels.reshape(-1))
        component_sizes.append(np.bincount(labels.reshape(-1), minlength=count + 1))
        scores.append(np.asarray(scores_map, dtype=np.float64).reshape(-1))

    num_components = sum(len(sizes) - 1 for sizes in component_sizes)
    if num_components == 0:
        raise DataError("PRO needs at least one ground-truth component")

    for labels, sizes in zip(per_pixel_labels, component_sizes):
        w = np.zeros(labels.size, dtype=np.float64)
        pos = labels > 0
        w[pos] = 1.0 / (sizes[labels[pos]] * num_components)
        weights.append(w)
        negatives.append(~pos)

    s = np.concatenate(scores)
    w = np.concatenate(weights)
    neg = np.concatenate(negatives)
    num_neg = int(neg.sum())
    if num_neg == 0:
        raise DataError("PRO needs at least one normal pixel")

    order = np.argsort(-s, kind="stable")
    pro_cum = np.concatenate([[0.0], np.cumsum(w[order])])
    fp_cum = np.concatenate([[0], np.cumsum(neg[order])])

    if max_thresholds is None:
        ends = _tie_group_ends(s[order])
    else:
        thresholds = np.unique(np.quantile(s, np.linspace(0.0, 1.0, max_thresholds)))[::-1]
        ascending = np.sort(s)
        ends = s.size - np.searchsorted(ascending, thresholds, side="left")

    fpr = np.concatenate([[0.0], fp_cum[ends] / num_neg])
    pro_values = np.concatenate([[0.0], pro_cum[ends]])
    return fpr, pro_values


def pro(
    score_maps: Sequence[np.ndarray],
    masks: Sequence[np.ndarray],
    fpr_limit: float = 0.3,
    connectivity: int = 8,
    max_thresholds: Optional[int] = None,
) -> float:
    """
    Normalised area under the PRO curve up to fpr_limit

    Args:
        score_maps: Per-image anomaly maps
        masks: Per-image binary ground truth
        fpr_limit: Integration limit in (0, 1]
        connectivity: 8 (default) or 4
        max_thresholds: Quantile-subsampled thresholds (approximate); exact when None

    Returns:
        Value in [0, 1]
    """
    if not 0.0 < fpr_limit <= 1.0:
        raise ConfigError(f"fpr_limit must be in (0, 1], got {fpr_limit}")
    fpr, pro_values = pro_curve(score_maps, masks, connectivity, max_thresholds)

    inside = fpr <= fpr_limit
    x = fpr[inside]
    y = pro_values[inside]
    if not inside.all():
        nxt = int(np.argmax(~inside))
        x0, x1 = fpr[nxt - 1], fpr[nxt]
        y0, y1 = pro_values[nxt - 1], pro_values[nxt]
        y_lim = y0 + (y1 - y0) * (fpr_limit - x0) / (x1 - x0)
        x = np.append(x, fpr_limit)
        y = np.append(y, y_lim)
    area = trapezoid(y, x) / fpr_limit
    return float(np.clip(area, 0.0, 1.0))


def mad(report: MetricReport) -> float:
    """Mean of the available metrics"""
    values = [getattr(report, key) for key in METRIC_KEYS if getattr(report, key) is not None]
    return float(np.mean(values))


def _metric_values(records: Sequence[EvalRecord], cfg: MetricsConfig) -> Dict[str, Optional[float]]:
    labels = [r.gt_label for r in records]
    values: Dict[str, Optional[float]] = {
        "I_AUROC": auroc([r.image_score for r in records], labels),
        "P_AUROC": None,
        "P_AP": None,
        "PRO": None,
    }

    pixel_records = [r for r in records if not r.mask_missing]
    if len(pixel_records) < len(records):
        logger.warning(f"{len(records) - len(pixel_records)} images without masks excluded from pixel metrics")
    if not pixel_records or not any(r.gt_mask.any() for r in pixel_records):
        logger.warning("No anomalous pixels in the evaluation set; pixel metrics skipped")
        return values

    pixel_scores = np.concatenate([r.pixel_scores.reshape(-1) for r in pixel_records])
    pixel_labels = np.concatenate([r.gt_mask.reshape(-1) for r in pixel_records]).astype(np.uint8)
    values["P_AUROC"] = auroc(pixel_scores, pixel_labels)
    values["P_AP"] = average_precision(pixel_scores, pixel_labels)
    values["PRO"] = pro(
        [r.pixel_scores for r in pixel_records],
        [r.gt_mask for r in pixel_records],
        cfg.pro_fpr_limit,
        cfg.pro_connectivity,
        cfg.pro_max_thresholds,
    )
    return values


def evaluate(records: Sequence[EvalRecord], cfg: Optional[MetricsConfig] = None) -> EvaluationReport:
    """
    All four metrics over a record set, with per-category breakdowns

    Args:
        records: Evaluation records (both image classes required)
        cfg: Metrics section; defaults when omitted

    Returns:
        EvaluationReport
    """
    cfg = cfg or MetricsConfig()
    if not records:
        raise DataError("nothing to evaluate")

    overall = _metric_values(records, cfg)
    per_category: Dict[str, MetricReport] = {}
    categories = sorted({r.category for r in records if r.category})
    if len(categories) > 1:
        for category in categories:
            subset = [r for r in records if r.category == category]
            try:
                values = _metric_values(subset, cfg)
            except DataError as e:
                logger.warning(f"Skipping per-category metrics for {category}: {e}")
                continue
            report = MetricReport(mAD=0.0, **values)
            per_category[category] = report.model_copy(update={"mAD": mad(report)})

    report = EvaluationReport(mAD=0.0, per_category=per_category, num_images=len(records), **overall)
    return report.model_copy(update={"mAD": mad(report)})
