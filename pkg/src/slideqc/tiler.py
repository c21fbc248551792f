"""Foreground extraction and uniform grid tiling.

The tiler separates tissue from the bright glass background with Otsu's
threshold on the HSV value channel, lays a non-overlapping 224-stride grid
over the slide, and cuts patches for every grid cell that holds enough
foreground (and, when an annotation raster is supplied, enough coverage by
a single class).
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from slideqc.wsi_store import (
    N_CLASSES,
    PATCH_SIZE,
    UNLABELED,
    PatchRecord,
    read_json,
    write_json,
)

logger = logging.getLogger(__name__)

STRIDE = PATCH_SIZE

DEFAULT_MIN_FG_FRACTION = 0.5
DEFAULT_MIN_OVERLAP = 0.70


# ---------------------------------------------------------------------------
# color conversion
# ---------------------------------------------------------------------------


def rgb_to_hsv_image(image: np.ndarray) -> np.ndarray:
    """Convert an RGB uint8 image to float HSV.

    Hue is in degrees [0, 360), saturation and value in [0, 1]. Gray pixels
    take hue 0 by convention; black pixels also take saturation 0.
    """
    rgb = np.asarray(image, dtype=np.float64) / 255.0
    v = rgb.max(axis=-1)
    c = v - rgb.min(axis=-1)
    s = np.where(v > 0, c / np.where(v > 0, v, 1.0), 0.0)

    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    safe_c = np.where(c > 0, c, 1.0)
    h = np.zeros_like(v)
    is_r = (v == r) & (c > 0)
    is_g = (v == g) & (c > 0) & ~is_r
    is_b = (v == b) & (c > 0) & ~is_r & ~is_g
    h = np.where(is_r, ((g - b) / safe_c) % 6.0, h)
    h = np.where(is_g, (b - r) / safe_c + 2.0, h)
    h = np.where(is_b, (r - g) / safe_c + 4.0, h)
    return np.stack([h * 60.0, s, v], axis=-1)


def rgb_to_hsv(r: int, g: int, b: int) -> tuple:
    """Scalar convenience wrapper around rgb_to_hsv_image."""
    h, s, v = rgb_to_hsv_image(np.array([[[r, g, b]]], dtype=np.uint8))[0, 0]
    return float(h), float(s), float(v)


def value_channel(image: np.ndarray) -> np.ndarray:
    """HSV value channel of an RGB uint8 image, kept in uint8 [0, 255]."""
    return np.asarray(image, dtype=np.uint8).max(axis=-1)


# ---------------------------------------------------------------------------
# Otsu threshold
# ---------------------------------------------------------------------------


def otsu_threshold(histogram: np.ndarray) -> int:
    """Threshold maximizing between-class variance of a 256-bin histogram.

    A candidate t splits the bins into {value < t} and {value >= t}; only
    candidates where both sides carry mass compete. Ties resolve to the
    smallest t. A histogram whose mass sits in a single bin b returns b.

    The comparison runs in exact integer arithmetic: with side masses
    n0, n1 and side sums s0, s1, the between-class variance is proportional
    to (s0*n1 - s1*n0)^2 / (n0*n1), which cross-multiplies to an integer
    test. This keeps tied plateaus deterministic.
    """
    hist = np.asarray(histogram)
    if hist.shape != (256,):
        raise ValueError(f"otsu_threshold: expected 256 bins, got {hist.shape}")
    if np.any(hist < 0):
        raise ValueError("otsu_threshold: negative bin count")
    counts = [int(c) for c in hist]
    total = sum(counts)
    if total == 0:
        raise ValueError("otsu_threshold: empty histogram")
    nonzero = [i for i, c in enumerate(counts) if c > 0]
    if len(nonzero) == 1:
        return nonzero[0]

    weighted = [i * c for i, c in enumerate(counts)]
    total_weighted = sum(weighted)
    best_t = None
    best_num = None  # (s0*n1 - s1*n0)^2
    best_den = None  # n0*n1
    n0 = 0
    s0 = 0
    for t in range(1, 256):
        n0 += counts[t - 1]
        s0 += weighted[t - 1]
        n1 = total - n0
        if n0 == 0 or n1 == 0:
            continue
        s1 = total_weighted - s0
        num = (s0 * n1 - s1 * n0) ** 2
        den = n0 * n1
        if best_t is None or num * best_den > best_num * den:
            best_t, best_num, best_den = t, num, den
    return best_t


# ---------------------------------------------------------------------------
# foreground mask
# ---------------------------------------------------------------------------


@dataclass
class ForegroundMask:
    """Per-pixel tissue mask plus the threshold that produced it.

    degenerate flags a single-valued slide, where no threshold can separate
    tissue from background and the mask comes back all false.
    """

    mask: np.ndarray
    threshold: int
    degenerate: bool = False


def extract_foreground(image: np.ndarray) -> ForegroundMask:
    """Mark pixels whose value channel falls below the Otsu threshold.

    Bright background (glass) sits above the threshold; stained tissue
    falls below it. A slide made of one single color yields an all-false
    mask and sets the degenerate flag.
    """
    value = value_channel(image)
    hist = np.bincount(value.ravel(), minlength=256)
    threshold = otsu_threshold(hist)
    degenerate = int(np.count_nonzero(hist)) == 1
    if degenerate:
        logger.warning(
            "extract_foreground: slide holds a single value (%d), mask is empty",
            threshold,
        )
    mask = value < threshold
    return ForegroundMask(mask=mask, threshold=int(threshold), degenerate=degenerate)


# ---------------------------------------------------------------------------
# grid planning
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GridCell:
    x: int
    y: int
    label: Optional[int] = None


@dataclass
class GridPlan:
    """Uniform tiling plan: all grid origins plus the selected subset."""

    stride: int
    cells: list = field(default_factory=list)
    selected: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "stride": self.stride,
            "cells": [
                {"x": c.x, "y": c.y, "label": c.label} for c in self.selected
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GridPlan":
        selected = [
            GridCell(x=int(c["x"]), y=int(c["y"]), label=c.get("label"))
            for c in d["cells"]
        ]
        for cell in selected:
            if cell.x % d["stride"] or cell.y % d["stride"]:
                raise ValueError(
                    f"grid plan: cell ({cell.x}, {cell.y}) is off the "
                    f"{d['stride']}-stride grid"
                )
        return cls(
            stride=int(d["stride"]),
            cells=[(c.x, c.y) for c in selected],
            selected=selected,
        )

    def save(self, path) -> None:
        write_json(path, self.to_dict())

    @classmethod
    def load(cls, path) -> "GridPlan":
        return cls.from_dict(read_json(path))


def grid_origins(width: int, height: int, stride: int = STRIDE) -> list:
    """Top-left coordinates of every full stride x stride cell, (y, x) order."""
    return [
        (x, y)
        for y in range(0, height - stride + 1, stride)
        for x in range(0, width - stride + 1, stride)
    ]


def plan_grid(
    fg_mask: np.ndarray,
    annotation_raster: Optional[np.ndarray] = None,
    min_fg_fraction: float = DEFAULT_MIN_FG_FRACTION,
    min_overlap: float = DEFAULT_MIN_OVERLAP,
    stride: int = STRIDE,
) -> GridPlan:
    """Select grid cells by foreground content and annotation coverage.

    A cell is selected when at least min_fg_fraction of its pixels are
    foreground. With an annotation raster, the cell additionally needs a
    single class covering at least min_overlap of its area; the covering
    class becomes the cell label, with ties going to the smaller class id.
    Slides smaller than one stride in either direction yield an empty plan.
    """
    if not (0.0 <= min_fg_fraction <= 1.0) or not (0.0 < min_overlap <= 1.0):
        raise ValueError("plan_grid: fractions must lie in [0, 1]")
    h, w = fg_mask.shape
    if annotation_raster is not None and annotation_raster.shape != (h, w):
        raise ValueError(
            f"plan_grid: annotation raster {annotation_raster.shape} does not "
            f"match mask {(h, w)}"
        )
    cells = grid_origins(w, h, stride)
    area = stride * stride
    selected = []
    for x, y in cells:
        window = fg_mask[y : y + stride, x : x + stride]
        if int(np.count_nonzero(window)) < min_fg_fraction * area:
            continue
        if annotation_raster is None:
            selected.append(GridCell(x=x, y=y, label=None))
            continue
        counts = np.bincount(
            annotation_raster[y : y + stride, x : x + stride].ravel(),
            minlength=256,
        )[:N_CLASSES]
        coverage = counts / area
        eligible = coverage >= min_overlap
        if not eligible.any():
            continue
        masked = np.where(eligible, coverage, -1.0)
        selected.append(GridCell(x=x, y=y, label=int(np.argmax(masked))))
    return GridPlan(stride=stride, cells=cells, selected=selected)


def dominant_cell_labels(
    label_raster: np.ndarray, cells, stride: int = STRIDE
) -> list:
    """Majority class id per cell, ignoring unlabeled pixels.

    Returns one label per (x, y) cell, or None for cells without a single
    labeled pixel. Ties resolve to the smaller class id. The same rule
    backs oracle classification and evaluation against a truth raster, so
    the two always agree cell for cell.
    """
    labels = []
    for x, y in cells:
        counts = np.bincount(
            label_raster[y : y + stride, x : x + stride].ravel(), minlength=256
        )[:N_CLASSES]
        labels.append(int(np.argmax(counts)) if counts.sum() > 0 else None)
    return labels


def extract_patches(
    image: np.ndarray, plan: GridPlan, slide_id: str = "slide"
) -> list:
    """Cut the selected cells into PatchRecords, ordered by (y, x).

    Raises ValueError when a selected cell would read outside the image.
    """
    h, w = image.shape[:2]
    patches = []
    for cell in sorted(plan.selected, key=lambda c: (c.y, c.x)):
        if cell.x < 0 or cell.y < 0 or cell.x + plan.stride > w or cell.y + plan.stride > h:
            raise ValueError(
                f"extract_patches: cell ({cell.x}, {cell.y}) leaves the "
                f"{w}x{h} slide"
            )
        pixels = np.array(
            image[cell.y : cell.y + plan.stride, cell.x : cell.x + plan.stride],
            dtype=np.uint8,
        )
        patches.append(
            PatchRecord(
                slide_id=slide_id,
                x=cell.x,
                y=cell.y,
                pixels=pixels,
                label=cell.label,
                size=plan.stride,
            )
        )
    return patches
