"""Evaluation metrics, throughput benchmarking, and stain statistics.

Confusion-matrix metrics treat artifact-free as the positive class.
Metrics whose denominator is zero are reported as absent rather than
coerced to 0, so a split without positives simply has no sensitivity.
Note on naming: specificity here is TN / (TN + FP); the precision
TP / (TP + FP) is always reported separately so the two cannot be
conflated.
"""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from slideqc.experts import KIND_EXTERNAL, KIND_TRAINED, ExpertModel, predict_batch
from slideqc.tiler import rgb_to_hsv_image
from slideqc.wsi_store import PATCH_SIZE

# Cost model for the hand-crafted features: every pixel of a patch is
# touched a fixed number of times (color conversion, Laplacian, gradient,
# threshold tests), priced at 10 operations per pixel.
FEATURE_OPS_PER_PIXEL = 10


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    def __post_init__(self):
        if min(self.tp, self.fp, self.tn, self.fn) < 0:
            raise ValueError("ConfusionCounts: negative count")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


def confusion_from_labels(predicted, truth, positive_label: int = 0) -> ConfusionCounts:
    """Count a binary confusion matrix from per-item class labels."""
    predicted = np.asarray(predicted)
    truth = np.asarray(truth)
    if predicted.shape != truth.shape:
        raise ValueError("confusion_from_labels: length mismatch")
    pred_pos = predicted == positive_label
    true_pos = truth == positive_label
    return ConfusionCounts(
        tp=int(np.count_nonzero(pred_pos & true_pos)),
        fp=int(np.count_nonzero(pred_pos & ~true_pos)),
        tn=int(np.count_nonzero(~pred_pos & ~true_pos)),
        fn=int(np.count_nonzero(~pred_pos & true_pos)),
    )


def classification_metrics(counts: ConfusionCounts) -> dict:
    """Accuracy, sensitivity, specificity, precision, F1 from counts.

    Each metric appears in the result only when its denominator is
    nonzero. F1 needs both precision and sensitivity defined and their
    sum positive.
    """
    out = {}
    if counts.total > 0:
        out["accuracy"] = (counts.tp + counts.tn) / counts.total
    if counts.tp + counts.fn > 0:
        out["sensitivity"] = counts.tp / (counts.tp + counts.fn)
    if counts.tn + counts.fp > 0:
        out["specificity"] = counts.tn / (counts.tn + counts.fp)
    if counts.tp + counts.fp > 0:
        out["precision"] = counts.tp / (counts.tp + counts.fp)
    if "precision" in out and "sensitivity" in out:
        denom = out["precision"] + out["sensitivity"]
        if denom > 0:
            out["f1"] = 2.0 * out["precision"] * out["sensitivity"] / denom
    return out


def dice(mask_a: np.ndarray, mask_b: np.ndarray) -> float:
    """Dice overlap of two boolean masks; two empty masks count as 1.0."""
    a = np.asarray(mask_a, dtype=bool)
    b = np.asarray(mask_b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"dice: shapes {a.shape} and {b.shape} disagree")
    size_a = int(np.count_nonzero(a))
    size_b = int(np.count_nonzero(b))
    if size_a + size_b == 0:
        return 1.0
    overlap = int(np.count_nonzero(a & b))
    return 2.0 * overlap / (size_a + size_b)


def cohen_kappa(labels_a, labels_b) -> float:
    """Chance-corrected agreement between two label sequences.

    kappa = (p_o - p_e) / (1 - p_e) with p_o the observed agreement and
    p_e the expected agreement under independent marginals. When p_e
    reaches 1 both sequences are constant and identical, so kappa is 1.
    """
    a = np.asarray(labels_a)
    b = np.asarray(labels_b)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("cohen_kappa: need two equal-length label vectors")
    if a.size == 0:
        raise ValueError("cohen_kappa: empty input")
    n = a.size
    p_o = float(np.count_nonzero(a == b)) / n
    categories = np.union1d(a, b)
    p_e = 0.0
    for cat in categories:
        p_e += (np.count_nonzero(a == cat) / n) * (np.count_nonzero(b == cat) / n)
    if p_e >= 1.0:
        return 1.0
    return (p_o - p_e) / (1.0 - p_e)


# ---------------------------------------------------------------------------
# complexity and throughput
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ComplexityProfile:
    """Parameter count, per-patch flop count, and measured throughput."""

    name: str
    param_count: int
    flop_count: int
    throughput_pps: float


def model_complexity(model: ExpertModel) -> tuple:
    """(param_count, flop_count) per patch for a model.

    Trained feature models count their weight matrix as parameters; the
    flop estimate is one multiply plus one add per weight, plus the
    feature-extraction cost of FEATURE_OPS_PER_PIXEL per patch pixel.
    External models report their manifest entries verbatim.
    """
    if model.kind == KIND_TRAINED:
        params = int(model.weights.size)
        flops = 2 * params + FEATURE_OPS_PER_PIXEL * PATCH_SIZE * PATCH_SIZE
        return params, flops
    if model.kind == KIND_EXTERNAL:
        return int(model.manifest["param_count"]), int(model.manifest["flop_count"])
    raise ValueError(f"model_complexity: unsupported kind {model.kind}")


def throughput_bench(
    model: ExpertModel, patches, repeats: int = 5, name: str = "model"
) -> ComplexityProfile:
    """Median patches-per-second over timed prediction passes.

    One untimed warm-up pass runs first. Needs at least one patch and one
    repeat.
    """
    patches = list(patches)
    if not patches:
        raise ValueError("throughput_bench: empty patch list")
    if repeats < 1:
        raise ValueError("throughput_bench: repeats must be >= 1")
    predict_batch(model, patches)
    rates = []
    for _ in range(repeats):
        start = time.perf_counter()
        predict_batch(model, patches)
        elapsed = time.perf_counter() - start
        rates.append(len(patches) / max(elapsed, 1e-9))
    params, flops = model_complexity(model)
    return ComplexityProfile(
        name=name,
        param_count=params,
        flop_count=flops,
        throughput_pps=float(np.median(rates)),
    )


# ---------------------------------------------------------------------------
# stain statistics
# ---------------------------------------------------------------------------


def hs_stats(patches) -> tuple:
    """Mean hue and saturation per patch, plus a cohort summary.

    Returns (rows, summary): rows are (patch_id, mean_hue, mean_sat) with
    hue in degrees, and the summary holds the across-patch mean and std
    of both quantities.
    """
    rows = []
    hues = []
    sats = []
    for patch in patches:
        pixels = patch.pixels if hasattr(patch, "pixels") else patch
        hsv = rgb_to_hsv_image(pixels)
        mean_hue = float(hsv[..., 0].mean())
        mean_sat = float(hsv[..., 1].mean())
        patch_id = (
            f"{patch.slide_id}_{patch.x}_{patch.y}"
            if hasattr(patch, "slide_id")
            else f"patch_{len(rows)}"
        )
        rows.append((patch_id, mean_hue, mean_sat))
        hues.append(mean_hue)
        sats.append(mean_sat)
    if not rows:
        raise ValueError("hs_stats: empty patch list")
    summary = {
        "hue_mean": float(np.mean(hues)),
        "hue_std": float(np.std(hues)),
        "sat_mean": float(np.mean(sats)),
        "sat_std": float(np.std(sats)),
        "n_patches": len(rows),
    }
    return rows, summary


def write_hs_csv(rows, path) -> None:
    import csv

    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["patch_id", "mean_hue", "mean_sat"])
        for patch_id, mean_hue, mean_sat in rows:
            writer.writerow([patch_id, repr(mean_hue), repr(mean_sat)])
