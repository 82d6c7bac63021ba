"""Confusion counting, binary change-detection scores, and error-map rendering.

Counts are pooled (micro-averaged) across images by field-wise addition, so a
dataset-level score is computed from one merged ``ConfusionCounts``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

# Rendering palette: true positive, true negative, false positive, false negative.
TP_COLOR = (255, 255, 255)
TN_COLOR = (0, 0, 0)
FP_COLOR = (255, 0, 0)
FN_COLOR = (0, 0, 255)

METRICS_CSV_HEADER = ("split", "ratio", "model", "F1", "Pre", "Rec", "OA", "KC", "IoU")


@dataclass(frozen=True)
class ConfusionCounts:
    """Pixel tallies of a binary prediction against ground truth."""

    tp: int = 0
    tn: int = 0
    fp: int = 0
    fn: int = 0

    def __post_init__(self):
        for name in ("tp", "tn", "fp", "fn"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.tn + other.tn,
                               self.fp + other.fp, self.fn + other.fn)

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn


@dataclass(frozen=True)
class MetricSet:
    """Scores derived from one ``ConfusionCounts``."""

    f1: float
    precision: float
    recall: float
    oa: float
    kc: float
    iou: float


def binarize(values: np.ndarray, threshold: float = 0.5,
             from_logits: bool = True) -> np.ndarray:
    """Threshold sigmoid probabilities into a {0,1} uint8 mask.

    A pixel is positive iff its probability strictly exceeds ``threshold``;
    for logit input the comparison happens in logit space, so a logit of 0 at
    threshold 0.5 is negative.
    """
    values = np.asarray(values)
    if not np.isfinite(values).all():
        raise ValueError("binarize requires finite inputs")
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must lie in (0,1), got {threshold}")
    cut = math.log(threshold / (1.0 - threshold)) if from_logits else threshold
    return (values > cut).astype(np.uint8)


def _check_binary_pair(pred: np.ndarray, gt: np.ndarray):
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
    for name, arr in (("pred", pred), ("gt", gt)):
        if not np.isin(arr, (0, 1)).all():
            raise ValueError(f"{name} mask must be binary (values in {{0,1}})")
    return pred.astype(bool), gt.astype(bool)


def confusion(pred: np.ndarray, gt: np.ndarray) -> ConfusionCounts:
    """Exact pixel tallies of a binary mask pair."""
    pred, gt = _check_binary_pair(pred, gt)
    return ConfusionCounts(
        tp=int(np.count_nonzero(pred & gt)),
        tn=int(np.count_nonzero(~pred & ~gt)),
        fp=int(np.count_nonzero(pred & ~gt)),
        fn=int(np.count_nonzero(~pred & gt)),
    )


def compute_metrics(c: ConfusionCounts) -> MetricSet:
    """Scores from pooled counts.

    Degenerate cases keep every score defined: precision/recall fall back to 0
    when their denominator vanishes, F1 to 0 when precision+recall is 0, IoU to
    0 with no positives anywhere, and the chance-corrected KC becomes 1 for a
    perfect single-class prediction (0 otherwise when chance agreement is 1).
    """
    total = c.total
    if total <= 0:
        raise ValueError("confusion counts are empty")
    tp, tn, fp, fn = c.tp, c.tn, c.fp, c.fn

    precision = tp / (tp + fp) if (tp + fp) > 0 else 0.0
    recall = tp / (tp + fn) if (tp + fn) > 0 else 0.0
    f1 = (2.0 * precision * recall / (precision + recall)
          if (precision + recall) > 0 else 0.0)
    oa = (tp + tn) / total
    iou = tp / (tp + fn + fp) if (tp + fn + fp) > 0 else 0.0
    chance = ((tp + fn) * (tp + fp) + (tn + fp) * (tn + fn)) / total ** 2
    if 1.0 - chance < 1e-12:
        kc = 1.0 if oa == 1.0 else 0.0
    else:
        kc = (oa - chance) / (1.0 - chance)
    return MetricSet(f1=f1, precision=precision, recall=recall, oa=oa, kc=kc, iou=iou)


def render_confusion_map(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """RGB error map: TP white, TN black, FP red, FN blue.

    Color pixel counts equal the confusion tallies by construction.
    """
    pred, gt = _check_binary_pair(pred, gt)
    out = np.zeros(pred.shape + (3,), dtype=np.uint8)
    out[pred & gt] = TP_COLOR
    out[~pred & ~gt] = TN_COLOR
    out[pred & ~gt] = FP_COLOR
    out[~pred & gt] = FN_COLOR
    return out


def format_percent(value: float) -> str:
    """Score as a percentage with two decimals, e.g. 0.80934 -> '80.93'."""
    return f"{100.0 * value:.2f}"


def write_metrics_csv(path, rows) -> None:
    """Write the metrics report: one row per (split, ratio, model) triple.

    ``rows`` yields (split, ratio, model, MetricSet); scores are formatted as
    two-decimal percentages.
    """
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METRICS_CSV_HEADER)
        for split, ratio, model, m in rows:
            writer.writerow([
                split, ratio, model,
                format_percent(m.f1), format_percent(m.precision),
                format_percent(m.recall), format_percent(m.oa),
                format_percent(m.kc), format_percent(m.iou),
            ])
