"""Segmentation matrix, QC report, and artifact-free region extraction.

Per-patch decisions land in a small class matrix (one cell per grid
position, 255 where nothing was evaluated). From the matrix come the
artifact composition report with the accept/discard verdict, the rendered
segmentation map, and the binarized artifact-free mask that is closed
morphologically, resized to slide resolution, and multiplied into the
slide elementwise.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import ndimage

from slideqc.wsi_store import CLASS_NAMES, N_CLASSES, UNLABELED

DEFAULT_TAU = 0.5
DEFAULT_CLOSE_KERNEL = 3

# Rendering palette: artifact-free green, blood red, blur blue, bubble
# yellow, damage magenta, fold cyan, unevaluated white.
PALETTE = {
    0: (0, 255, 0),
    1: (255, 0, 0),
    2: (0, 0, 255),
    3: (255, 255, 0),
    4: (255, 0, 255),
    5: (0, 255, 255),
    UNLABELED: (255, 255, 255),
}


def matrix_shape(width: int, height: int, stride: int = 224) -> tuple:
    """Matrix dimensions covering a width x height slide: ceil division."""
    return (height + stride - 1) // stride, (width + stride - 1) // stride


def fill_matrix(
    decisions, width: int, height: int, stride: int = 224
) -> np.ndarray:
    """Place decisions into a (rows, cols) uint8 matrix, 255 elsewhere.

    Coordinates must sit on the stride grid, inside the slide, and be
    unique; anything else raises ValueError.
    """
    if width < 1 or height < 1 or stride < 1:
        raise ValueError("fill_matrix: non-positive dimensions")
    rows, cols = matrix_shape(width, height, stride)
    matrix = np.full((rows, cols), UNLABELED, dtype=np.uint8)
    seen = set()
    for d in decisions:
        if d.x % stride or d.y % stride:
            raise ValueError(
                f"fill_matrix: decision at ({d.x}, {d.y}) is off the "
                f"{stride}-stride grid"
            )
        if not (0 <= d.x < width and 0 <= d.y < height):
            raise ValueError(
                f"fill_matrix: decision at ({d.x}, {d.y}) leaves the "
                f"{width}x{height} slide"
            )
        if not (0 <= d.label < N_CLASSES):
            raise ValueError(f"fill_matrix: unknown label id {d.label}")
        key = (d.x, d.y)
        if key in seen:
            raise ValueError(f"fill_matrix: duplicate decision at {key}")
        seen.add(key)
        matrix[d.y // stride, d.x // stride] = d.label
    return matrix


# ---------------------------------------------------------------------------
# QC report
# ---------------------------------------------------------------------------


@dataclass
class QCReport:
    """Artifact composition of one slide plus the accept/discard verdict.

    rho is the artifact-free fraction of evaluated cells; the slide is
    accepted when rho >= tau. per_class_pct maps artifact class names to
    their percentage of evaluated cells. throughput_pps stays None unless
    a measured patches-per-second figure is attached explicitly, keeping
    report files reproducible run to run.
    """

    n_total: int
    n_per_class: dict
    per_class_pct: dict
    rho: float
    tau: float
    verdict: str
    throughput_pps: Optional[float] = None

    def to_dict(self) -> dict:
        return {
            "n_total": self.n_total,
            "n_per_class": dict(self.n_per_class),
            "per_class_pct": dict(self.per_class_pct),
            "rho": self.rho,
            "tau": self.tau,
            "verdict": self.verdict,
            "throughput_pps": self.throughput_pps,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "QCReport":
        return cls(
            n_total=int(d["n_total"]),
            n_per_class={k: int(v) for k, v in d["n_per_class"].items()},
            per_class_pct={k: float(v) for k, v in d["per_class_pct"].items()},
            rho=float(d["rho"]),
            tau=float(d["tau"]),
            verdict=str(d["verdict"]),
            throughput_pps=(
                None if d.get("throughput_pps") is None else float(d["throughput_pps"])
            ),
        )


def artifact_report(
    matrix: np.ndarray,
    tau: float = DEFAULT_TAU,
    throughput_pps: Optional[float] = None,
) -> QCReport:
    """Summarize a segmentation matrix into a QCReport.

    Only evaluated cells (value != 255) enter the statistics. A matrix
    with no evaluated cells raises ValueError.
    """
    if not (0.0 <= tau <= 1.0):
        raise ValueError(f"artifact_report: tau {tau} outside [0, 1]")
    values = matrix[matrix != UNLABELED]
    if np.any(values >= N_CLASSES):
        bad = int(values[values >= N_CLASSES][0])
        raise ValueError(f"artifact_report: unknown class id {bad} in matrix")
    n_total = int(values.size)
    if n_total == 0:
        raise ValueError("artifact_report: no evaluated cells in matrix")
    counts = np.bincount(values, minlength=N_CLASSES)
    n_per_class = {CLASS_NAMES[k]: int(counts[k]) for k in range(N_CLASSES)}
    per_class_pct = {
        CLASS_NAMES[k]: 100.0 * int(counts[k]) / n_total for k in range(1, N_CLASSES)
    }
    rho = int(counts[0]) / n_total
    return QCReport(
        n_total=n_total,
        n_per_class=n_per_class,
        per_class_pct=per_class_pct,
        rho=rho,
        tau=tau,
        verdict="accept" if rho >= tau else "discard",
        throughput_pps=throughput_pps,
    )


# ---------------------------------------------------------------------------
# mask pipeline
# ---------------------------------------------------------------------------


def binarize_mask(matrix: np.ndarray) -> np.ndarray:
    """True exactly where the matrix says artifact-free (class 0)."""
    return np.asarray(matrix) == 0


def morph_close(mask: np.ndarray, kernel: int = DEFAULT_CLOSE_KERNEL) -> np.ndarray:
    """Morphological closing (dilate, then erode) with a square kernel.

    The mask is padded before dilation so the grown region is not clipped
    at the array edge; cells beyond the grid count as false. Closing can
    only turn false cells true (it fills pores smaller than the kernel),
    never the reverse. The kernel must be odd; kernel 1 is the identity.
    """
    mask = np.asarray(mask, dtype=bool)
    if kernel < 1 or kernel % 2 == 0:
        raise ValueError(f"morph_close: kernel must be odd and positive, got {kernel}")
    if kernel == 1:
        return mask.copy()
    pad = kernel // 2
    structure = np.ones((kernel, kernel), dtype=bool)
    padded = np.pad(mask, pad, mode="constant", constant_values=False)
    dilated = ndimage.binary_dilation(padded, structure=structure)
    eroded = ndimage.binary_erosion(dilated, structure=structure, border_value=0)
    return eroded[pad:-pad, pad:-pad]


def resize_nearest(mask: np.ndarray, target: tuple) -> np.ndarray:
    """Nearest-neighbor upscale of a cell mask to (m, n) pixels.

    Output pixel (i, j) copies cell (floor(i * rows / m), floor(j * cols / n)).
    The target must be at least as large as the mask in both directions.
    """
    mask = np.asarray(mask)
    rows, cols = mask.shape
    m, n = target
    if m < rows or n < cols:
        raise ValueError(
            f"resize_nearest: target {target} smaller than mask {(rows, cols)}"
        )
    row_idx = (np.arange(m) * rows) // m
    col_idx = (np.arange(n) * cols) // n
    return mask[np.ix_(row_idx, col_idx)]


def apply_mask(image: np.ndarray, mask: np.ndarray, fill: str = "zero") -> np.ndarray:
    """Keep pixels where the mask is true, paint the rest with the fill.

    fill "zero" blanks masked-out pixels to black, "white" to 255.
    """
    image = np.asarray(image)
    mask = np.asarray(mask, dtype=bool)
    if image.shape[:2] != mask.shape:
        raise ValueError(
            f"apply_mask: image {image.shape[:2]} and mask {mask.shape} disagree"
        )
    if fill not in ("zero", "white"):
        raise ValueError(f"apply_mask: unknown fill {fill!r}")
    out = np.where(mask[..., None], image, np.uint8(0 if fill == "zero" else 255))
    return out.astype(np.uint8)


def render_segmentation(matrix: np.ndarray, scale: int = 1) -> np.ndarray:
    """Color-code a segmentation matrix, one pixel per cell times scale."""
    if scale < 1:
        raise ValueError(f"render_segmentation: scale must be >= 1, got {scale}")
    lut = np.full((256, 3), 255, dtype=np.uint8)
    for value, color in PALETTE.items():
        lut[value] = color
    known = set(PALETTE)
    present = set(int(v) for v in np.unique(matrix))
    if not present <= known:
        raise ValueError(f"render_segmentation: unknown class ids {sorted(present - known)}")
    rendered = lut[matrix]
    if scale > 1:
        rendered = np.repeat(np.repeat(rendered, scale, axis=0), scale, axis=1)
    return rendered
