"""ROI-restricted binary segmentation metrics.

All evaluation happens inside a fixed region of interest to counter the
heavy background/vessel class imbalance. A pixel counts as predicted-positive
when its probability is >= the threshold (ties go to positive). Metrics with
an empty denominator come back as NaN and are skipped (and counted) when
averaging over the test set.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import ShapeError
from .uqstats import SamplePool
from .validation import check_binary, check_nonempty_roi, check_same_shape

METRIC_NAMES = ("iou", "sensitivity", "specificity", "fpr", "fnr")


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


@dataclass(frozen=True)
class MetricSet:
    """Per-image (or aggregate) metric values; NaN marks an undefined entry."""

    iou: float
    sensitivity: float
    specificity: float
    fpr: float
    fnr: float

    def as_dict(self) -> dict[str, float]:
        return {name: getattr(self, name) for name in METRIC_NAMES}


@dataclass
class PrCurve:
    """Precision-recall points over descending thresholds, plus the
    step-sum average precision AP = sum_n (R_n - R_{n-1}) P_n."""

    thresholds: np.ndarray
    precision: np.ndarray
    recall: np.ndarray
    average_precision: float


def confusion(
    prob_map: np.ndarray,
    label: np.ndarray,
    roi: np.ndarray,
    threshold: float = 0.5,
) -> ConfusionCounts:
    """Pixel confusion counts within the ROI at one threshold."""
    prob = np.asarray(prob_map, dtype=np.float64)
    lab = check_binary(label, "label")
    mask = check_nonempty_roi(roi) == 1
    check_same_shape(("prob_map", prob), ("label", lab), ("roi", roi))
    pred = prob[mask] >= threshold
    truth = lab[mask] == 1
    tp = int(np.sum(pred & truth))
    fp = int(np.sum(pred & ~truth))
    fn = int(np.sum(~pred & truth))
    tn = int(np.sum(~pred & ~truth))
    return ConfusionCounts(tp=tp, fp=fp, tn=tn, fn=fn)


def _ratio(num: int, den: int) -> float:
    return num / den if den > 0 else math.nan


def metric_set(counts: ConfusionCounts) -> MetricSet:
    """IoU, sensitivity, specificity, FPR, FNR from confusion counts."""
    sens = _ratio(counts.tp, counts.tp + counts.fn)
    spec = _ratio(counts.tn, counts.tn + counts.fp)
    return MetricSet(
        iou=_ratio(counts.tp, counts.tp + counts.fp + counts.fn),
        sensitivity=sens,
        specificity=spec,
        fpr=1.0 - spec if not math.isnan(spec) else math.nan,
        fnr=1.0 - sens if not math.isnan(sens) else math.nan,
    )


def mean_over_test(per_image: Sequence[MetricSet]) -> tuple[MetricSet, dict[str, int]]:
    """Unweighted mean over images, skipping undefined (NaN) entries.

    Returns the aggregate plus a per-metric count of skipped images; a metric
    undefined on every image is an error.
    """
    if not per_image:
        raise ShapeError("mean_over_test needs at least one image")
    means: dict[str, float] = {}
    skipped: dict[str, int] = {}
    for name in METRIC_NAMES:
        values = np.array([getattr(m, name) for m in per_image], dtype=np.float64)
        defined = values[~np.isnan(values)]
        skipped[name] = int(np.sum(np.isnan(values)))
        if defined.size == 0:
            raise ShapeError(f"metric '{name}' is undefined on every image")
        means[name] = float(defined.mean())
    return MetricSet(**means), skipped


def pr_curve(
    prob_maps: np.ndarray | Sequence[np.ndarray],
    labels: np.ndarray | Sequence[np.ndarray],
    roi: np.ndarray,
    max_thresholds: int = 1024,
) -> PrCurve:
    """Micro-averaged precision-recall over all ROI pixels of the test set.

    Thresholds sweep the distinct pooled probabilities in descending order
    (quantile-thinned to ``max_thresholds`` levels when there are more).
    """
    probs = np.stack([np.asarray(p, dtype=np.float64) for p in prob_maps])
    labs = np.stack([check_binary(l, "labels") for l in labels])
    mask = check_nonempty_roi(roi) == 1
    check_same_shape(("prob_maps", probs[0]), ("labels", labs[0]), ("roi", roi))

    scores = probs[:, mask].ravel()
    truth = labs[:, mask].ravel() == 1
    n_pos = int(truth.sum())
    if n_pos < 1:
        raise ShapeError("pr_curve needs at least one positive ROI pixel")

    levels = np.unique(scores)[::-1]  # descending
    if levels.size > max_thresholds:
        qs = np.linspace(0.0, 1.0, max_thresholds)
        levels = np.unique(np.quantile(levels, qs))[::-1]

    order = np.argsort(-scores, kind="stable")
    sorted_scores = scores[order]
    tp_cum = np.cumsum(truth[order])
    # index of the last pooled pixel with score >= level
    counts = np.searchsorted(-sorted_scores, -levels, side="right")
    tp = tp_cum[counts - 1]
    precision = tp / counts
    recall = tp / n_pos

    prev_recall = np.concatenate([[0.0], recall[:-1]])
    ap = float(np.sum((recall - prev_recall) * precision))
    return PrCurve(
        thresholds=levels,
        precision=precision,
        recall=recall,
        average_precision=ap,
    )


def split_uncertainty(
    mc_outputs: Iterable,
    labels: np.ndarray | Sequence[np.ndarray],
    roi: np.ndarray,
    threshold: float = 0.5,
) -> tuple[SamplePool, SamplePool]:
    """Partition ROI pixels' epistemic values into correct/incorrect pools.

    A pixel is correct when its thresholded mean probability matches the
    label. Pools are concatenated across the whole test split at pixel level.
    """
    mask = check_nonempty_roi(roi) == 1
    correct_chunks: list[np.ndarray] = []
    incorrect_chunks: list[np.ndarray] = []
    n_images = 0
    for out, label in zip(mc_outputs, labels):
        lab = check_binary(label, "label")
        check_same_shape(("prob_mean", out.prob_mean), ("label", lab), ("roi", roi))
        pred = out.prob_mean[mask] >= threshold
        truth = lab[mask] == 1
        eps = np.asarray(out.epistemic, dtype=np.float64)[mask]
        hit = pred == truth
        correct_chunks.append(eps[hit])
        incorrect_chunks.append(eps[~hit])
        n_images += 1
    if n_images == 0:
        raise ShapeError("split_uncertainty received no images")
    correct = np.concatenate(correct_chunks)
    incorrect = np.concatenate(incorrect_chunks)
    return (
        SamplePool(correct, label="correct", source={"images": n_images}),
        SamplePool(incorrect, label="incorrect", source={"images": n_images}),
    )
