"""ROC construction and threshold selection on artifact-free scores.

Scores are probabilities of the artifact-free class; truth 1 means the
patch really is artifact-free. A score counts as positive at threshold t
when score >= t. The operating threshold t_s is picked as the largest
threshold whose true-positive rate still reaches the sensitivity target,
keeping as many genuinely clean patches as the target demands while
rejecting as much artifact as possible.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

logger = logging.getLogger(__name__)

DEFAULT_TARGET_SENSITIVITY = 0.98


@dataclass(frozen=True)
class RocPoint:
    fpr: float
    tpr: float
    threshold: float


@dataclass
class RocCurve:
    """Operating points sorted by threshold descending, plus trapezoid AUC."""

    points: list = field(default_factory=list)
    auc: float = 0.0


def _split_scores(scored):
    positives = []
    negatives = []
    for score, truth in scored:
        score = float(score)
        if not (0.0 <= score <= 1.0) or not math.isfinite(score):
            raise ValueError(f"roc_curve: score {score} outside [0, 1]")
        if truth not in (0, 1, True, False):
            raise ValueError(f"roc_curve: truth label {truth!r} is not binary")
        (positives if truth else negatives).append(score)
    return np.asarray(positives), np.asarray(negatives)


def roc_curve(scored) -> RocCurve:
    """Build a ROC curve from (score, truth) pairs.

    One operating point per distinct score value (that value acting as the
    threshold), preceded by the (0, 0) point at threshold +inf. Needs at
    least one positive and one negative example.
    """
    positives, negatives = _split_scores(scored)
    if len(positives) == 0 or len(negatives) == 0:
        raise ValueError(
            f"roc_curve: need both classes, got {len(positives)} positives and "
            f"{len(negatives)} negatives"
        )
    thresholds = np.unique(np.concatenate([positives, negatives]))[::-1]
    points = [RocPoint(fpr=0.0, tpr=0.0, threshold=math.inf)]
    for t in thresholds:
        tpr = float(np.count_nonzero(positives >= t)) / len(positives)
        fpr = float(np.count_nonzero(negatives >= t)) / len(negatives)
        points.append(RocPoint(fpr=fpr, tpr=tpr, threshold=float(t)))
    fprs = np.array([p.fpr for p in points])
    tprs = np.array([p.tpr for p in points])
    auc = float(0.5 * np.sum((fprs[1:] - fprs[:-1]) * (tprs[1:] + tprs[:-1])))
    return RocCurve(points=points, auc=auc)


def threshold_for_sensitivity(
    curve: RocCurve, target: float = DEFAULT_TARGET_SENSITIVITY
) -> float:
    """Largest threshold whose TPR reaches the target sensitivity.

    Points arrive sorted by threshold descending with TPR non-decreasing,
    so the first point at or above the target carries the answer. Should
    no point reach the target, the smallest threshold is returned with a
    saturation warning.
    """
    if not (0.0 < target <= 1.0):
        raise ValueError(f"threshold_for_sensitivity: target {target} outside (0, 1]")
    if not curve.points:
        raise ValueError("threshold_for_sensitivity: empty curve")
    for point in curve.points:
        if point.tpr >= target and math.isfinite(point.threshold):
            return point.threshold
    fallback = curve.points[-1].threshold
    logger.warning(
        "threshold_for_sensitivity: no threshold reaches TPR %.4f, "
        "falling back to the smallest threshold %.6f",
        target,
        fallback,
    )
    return fallback


def threshold_max_f1(scored):
    """Brute-force the distinct-score threshold maximizing F1.

    Positives are scores >= threshold. Ties resolve to the larger
    threshold. Returns (threshold, f1).
    """
    positives, negatives = _split_scores(scored)
    if len(positives) == 0:
        raise ValueError("threshold_max_f1: need at least one positive example")
    thresholds = np.unique(np.concatenate([positives, negatives]))[::-1]
    best_t = None
    best_f1 = -1.0
    for t in thresholds:
        tp = int(np.count_nonzero(positives >= t))
        fp = int(np.count_nonzero(negatives >= t))
        fn = len(positives) - tp
        denom = 2 * tp + fp + fn
        f1 = 2.0 * tp / denom if denom else 0.0
        if f1 > best_f1:
            best_t, best_f1 = float(t), f1
    return best_t, best_f1


@dataclass(frozen=True)
class CalibrationResult:
    t_s: float
    auc: float
    target_sensitivity: float
    achieved_tpr: float
    achieved_fpr: float

    def to_dict(self) -> dict:
        return {
            "t_s": self.t_s,
            "auc": self.auc,
            "target_sensitivity": self.target_sensitivity,
            "achieved_tpr": self.achieved_tpr,
            "achieved_fpr": self.achieved_fpr,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CalibrationResult":
        return cls(
            t_s=float(d["t_s"]),
            auc=float(d["auc"]),
            target_sensitivity=float(d["target_sensitivity"]),
            achieved_tpr=float(d["achieved_tpr"]),
            achieved_fpr=float(d["achieved_fpr"]),
        )


def calibrate_threshold(
    scored, target: float = DEFAULT_TARGET_SENSITIVITY
) -> CalibrationResult:
    """ROC + threshold selection in one step, with the achieved rates."""
    curve = roc_curve(scored)
    t_s = threshold_for_sensitivity(curve, target)
    chosen = next(p for p in curve.points if p.threshold == t_s)
    return CalibrationResult(
        t_s=t_s,
        auc=curve.auc,
        target_sensitivity=target,
        achieved_tpr=chosen.tpr,
        achieved_fpr=chosen.fpr,
    )
