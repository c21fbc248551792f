"""Seeded synthetic slides with per-pixel ground truth.

Each generated slide is a blob of tinted, noisy tissue on a white
background, with polygonal artifact regions painted inside the tissue:

    blood   saturated red blobs
    blur    locally smoothed tissue texture
    bubble  bright, desaturated discs with a dark rim
    damage  tissue riddled with bright holes exposing the background
    fold    dark, heavily saturated ridged bands

The truth raster is the rasterization of the very polygons written to
annotations.json, so annotations and truth agree pixel for pixel. All
randomness flows from one seeded generator; the same spec yields
byte-identical slide, truth, and annotation files.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from scipy import ndimage

from slideqc.tiler import STRIDE, extract_foreground, extract_patches, plan_grid
from slideqc.wsi_store import (
    AnnotationSet,
    PatchRecord,
    Region,
    Slide,
    SlideManifest,
    UNLABELED,
    _fill_polygon,
    load_label_raster,
    rasterize_annotations,
    save_patch_dataset,
    save_raster,
    save_slide,
    write_json,
)

MIN_DIM = 448
DEFAULT_TINT = (325.0, 0.38, 0.72)  # hue deg, sat, val
SNAP_MIN_RADIUS = 160.0  # blobs at least this large sit on grid-cell centers
BLUR_BOX = 13
BAND = 0.25  # accepted relative deviation from a region's target fraction


@dataclass(frozen=True)
class RegionSpec:
    """One artifact class and its target share of the tissue area."""

    class_id: int
    target_fraction: float

    def __post_init__(self):
        if not (1 <= self.class_id <= 5):
            raise ValueError(f"RegionSpec: class_id {self.class_id} outside 1..5")
        if not (0.0 < self.target_fraction <= 0.8):
            raise ValueError(
                f"RegionSpec: target_fraction {self.target_fraction} outside (0, 0.8]"
            )


@dataclass(frozen=True)
class SynthSpec:
    """Parameters for one synthetic slide."""

    seed: int
    width: int = 1344
    height: int = 1344
    regions: tuple = ()
    tint_hue: float = DEFAULT_TINT[0]
    tint_sat: float = DEFAULT_TINT[1]
    tint_val: float = DEFAULT_TINT[2]

    def __post_init__(self):
        for dim, name in ((self.width, "width"), (self.height, "height")):
            if dim < MIN_DIM or dim % STRIDE:
                raise ValueError(
                    f"SynthSpec: {name} must be a multiple of {STRIDE} and at "
                    f"least {MIN_DIM}, got {dim}"
                )
        total = sum(r.target_fraction for r in self.regions)
        if total > 0.8:
            raise ValueError(
                f"SynthSpec: target fractions sum to {total:.3f}, limit is 0.8"
            )


# ---------------------------------------------------------------------------
# noise and shapes
# ---------------------------------------------------------------------------


def _bilinear(grid: np.ndarray, h: int, w: int) -> np.ndarray:
    gh, gw = grid.shape
    ys = np.linspace(0.0, gh - 1.0, h)
    xs = np.linspace(0.0, gw - 1.0, w)
    y0 = np.minimum(ys.astype(np.int64), gh - 2)
    x0 = np.minimum(xs.astype(np.int64), gw - 2)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    top = grid[y0][:, x0] * (1.0 - fx) + grid[y0][:, x0 + 1] * fx
    bot = grid[y0 + 1][:, x0] * (1.0 - fx) + grid[y0 + 1][:, x0 + 1] * fx
    return top * (1.0 - fy) + bot * fy


def _noise_field(rng, shape, cells, amplitudes) -> np.ndarray:
    """Sum of bilinearly upsampled coarse Gaussian grids (value noise)."""
    h, w = shape
    out = np.zeros(shape)
    for cell, amp in zip(cells, amplitudes):
        grid = rng.standard_normal((h // cell + 2, w // cell + 2))
        out += amp * _bilinear(grid, h, w)
    return out


def _blob_polygon(rng, cx, cy, radius, n_vertices=28, irregularity=0.15):
    """Star-convex polygon around (cx, cy) with smoothed radial jitter."""
    angles = np.linspace(0.0, 2.0 * math.pi, n_vertices, endpoint=False)
    angles = angles + rng.uniform(0.0, 2.0 * math.pi)
    factors = 1.0 + irregularity * rng.standard_normal(n_vertices)
    kernel = np.array([0.25, 0.5, 0.25])
    factors = (
        kernel[0] * np.roll(factors, 1)
        + kernel[1] * factors
        + kernel[2] * np.roll(factors, -1)
    )
    factors = np.clip(factors, 0.85, 1.2)
    xs = cx + radius * factors * np.cos(angles)
    ys = cy + radius * factors * np.sin(angles)
    return tuple((float(x), float(y)) for x, y in zip(xs, ys))


def _rasterize_single(polygon, shape) -> np.ndarray:
    scratch = np.zeros(shape, dtype=np.uint8)
    _fill_polygon(scratch, polygon, 1)
    return scratch.astype(bool)


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------


def _hsv_to_rgb(h_deg, s, v) -> np.ndarray:
    h = (np.asarray(h_deg, dtype=np.float64) % 360.0) / 60.0
    i = np.floor(h).astype(np.int64) % 6
    f = h - np.floor(h)
    p = v * (1.0 - s)
    q = v * (1.0 - s * f)
    t = v * (1.0 - s * (1.0 - f))
    r = np.choose(i, [v, q, p, p, t, v])
    g = np.choose(i, [t, v, v, q, p, p])
    b = np.choose(i, [p, p, t, v, v, q])
    return np.stack([r, g, b], axis=-1)


def _render_from_truth(truth: np.ndarray, rng, tint) -> np.ndarray:
    """Paint an RGB image for a truth raster of class ids.

    Texture fields are drawn in a fixed order so rendering is a pure
    function of (truth, generator state, tint).
    """
    tint_hue, tint_sat, tint_val = tint
    h, w = truth.shape
    coarse_a = _noise_field(rng, (h, w), cells=(96, 24), amplitudes=(0.8, 0.45))
    coarse_b = _noise_field(rng, (h, w), cells=(64, 16), amplitudes=(0.8, 0.45))
    fine = _noise_field(rng, (h, w), cells=(12,), amplitudes=(1.0,))
    grain = rng.standard_normal((h, w))

    hue = tint_hue + 7.0 * coarse_a
    sat = np.clip(tint_sat + 0.06 * coarse_b, 0.15, 0.60)
    val = np.clip(
        tint_val + 0.04 * coarse_a - 0.03 * coarse_b + 0.025 * fine + 0.018 * grain,
        0.58,
        0.86,
    )
    base_rgb = _hsv_to_rgb(hue, sat, val)

    blood = truth == 1
    if blood.any():
        hue = np.where(blood, 2.0 + 5.0 * np.abs(coarse_b), hue)
        sat = np.where(blood, np.clip(0.88 + 0.05 * fine, 0.72, 0.98), sat)
        val = np.where(
            blood,
            np.clip(0.60 + 0.08 * coarse_b + 0.04 * fine + 0.015 * grain, 0.50, 0.72),
            val,
        )

    bubble = truth == 3
    if bubble.any():
        rim = bubble & ~ndimage.binary_erosion(bubble, iterations=5)
        interior = bubble & ~rim
        hue = np.where(bubble, 45.0, hue)
        sat = np.where(interior, np.clip(0.05 + 0.03 * np.abs(fine), 0.0, 0.12), sat)
        val = np.where(
            interior,
            np.clip(0.81 + 0.03 * fine + 0.008 * grain, 0.77, 0.85),
            val,
        )
        sat = np.where(rim, 0.22, sat)
        val = np.where(rim, np.clip(0.48 + 0.05 * fine, 0.42, 0.56), val)

    damage = truth == 4
    if damage.any():
        cut = np.quantile(fine[damage], 0.65)
        holes = damage & (fine > cut)
        solid = damage & ~holes
        sat = np.where(solid, sat * 0.85, sat)
        val = np.where(solid, np.clip(val * 0.98, 0.58, 0.86), val)
        sat = np.where(holes, 0.03, sat)
        val = np.where(holes, np.clip(0.965 + 0.02 * np.abs(fine), 0.955, 0.985), val)

    fold = truth == 5
    if fold.any():
        theta = rng.uniform(0.0, math.pi)
        wavelength = rng.uniform(22.0, 34.0)
        yy, xx = np.mgrid[0:h, 0:w]
        ridges = np.sin(
            2.0 * math.pi * (math.cos(theta) * xx + math.sin(theta) * yy) / wavelength
        )
        hue = np.where(fold, tint_hue - 12.0 + 4.0 * coarse_a, hue)
        sat = np.where(fold, np.clip(0.86 + 0.05 * fine, 0.70, 0.97), sat)
        val = np.where(
            fold,
            np.clip(0.52 + 0.05 * coarse_b + 0.06 * ridges + 0.012 * grain, 0.44, 0.62),
            val,
        )

    rgb = _hsv_to_rgb(hue, sat, val)

    blur = truth == 2
    if blur.any():
        blurred = ndimage.uniform_filter(base_rgb, size=(BLUR_BOX, BLUR_BOX, 1))
        rgb = np.where(blur[..., None], blurred, rgb)

    rgb = np.where((truth == UNLABELED)[..., None], 1.0, rgb)
    return np.clip(np.rint(rgb * 255.0), 0, 255).astype(np.uint8)


# ---------------------------------------------------------------------------
# region placement
# ---------------------------------------------------------------------------


def _cell_centers_inside(tissue_mask: np.ndarray) -> list:
    h, w = tissue_mask.shape
    centers = []
    for y in range(0, h - STRIDE + 1, STRIDE):
        for x in range(0, w - STRIDE + 1, STRIDE):
            cx, cy = x + STRIDE // 2, y + STRIDE // 2
            if tissue_mask[cy, cx]:
                centers.append((float(cx), float(cy)))
    return centers


def _place_class(rng, region_spec, tissue_mask, occupied):
    """Drop blobs of one class until their area enters the target band.

    Blobs must lie entirely inside the tissue and never overlap an already
    placed blob of any class. Large blobs snap to grid-cell centers so a
    full grid cell ends up covered by the class.
    """
    shape = tissue_mask.shape
    tissue_area = int(np.count_nonzero(tissue_mask))
    target_px = region_spec.target_fraction * tissue_area
    lo, hi = (1.0 - BAND) * target_px, (1.0 + BAND) * target_px
    centers = _cell_centers_inside(tissue_mask)
    polygons = []
    placed_px = 0
    shrink = 1.0
    attempts = 0
    while placed_px < lo:
        attempts += 1
        if attempts > 600:
            raise RuntimeError(
                f"synthgen: failed to place class {region_spec.class_id} at "
                f"fraction {region_spec.target_fraction} after {attempts - 1} tries"
            )
        if attempts % 8 == 0:
            shrink *= 0.97
        radius = math.sqrt(max(target_px - placed_px, 1.0) / math.pi) * shrink
        radius = min(radius, 0.35 * min(shape))
        radius = max(radius, 14.0)
        if radius >= SNAP_MIN_RADIUS and centers:
            cx, cy = centers[int(rng.integers(len(centers)))]
        else:
            ys, xs = np.nonzero(tissue_mask)
            pick = int(rng.integers(len(xs)))
            cx, cy = float(xs[pick]), float(ys[pick])
        polygon = _blob_polygon(rng, cx, cy, radius)
        blob = _rasterize_single(polygon, shape)
        blob_px = int(np.count_nonzero(blob))
        if blob_px == 0:
            continue
        if (blob & ~tissue_mask).any() or (blob & occupied).any():
            continue
        if placed_px + blob_px > hi:
            shrink *= 0.9
            continue
        occupied |= blob
        placed_px += blob_px
        polygons.append(polygon)
    return [Region(label=region_spec.class_id, polygon=p) for p in polygons]


# ---------------------------------------------------------------------------
# slide and corpus generation
# ---------------------------------------------------------------------------


def generate_slide(
    spec: SynthSpec, out_dir: Path | str, slide_id: Optional[str] = None
) -> Slide:
    """Generate one slide directory plus its truth raster (truth.png).

    The directory holds manifest.json, slide.png, annotations.json and
    truth.png. Regions are placed in the order the SynthSpec lists them.
    """
    out_dir = Path(out_dir)
    slide_id = slide_id or f"synth_{spec.seed}"
    rng = np.random.default_rng(spec.seed)
    w, h = spec.width, spec.height

    jitter = 0.02 * min(w, h)
    tissue_polygon = _blob_polygon(
        rng,
        w / 2.0 + rng.uniform(-jitter, jitter),
        h / 2.0 + rng.uniform(-jitter, jitter),
        0.49 * min(w, h),
        n_vertices=48,
        irregularity=0.05,
    )
    tissue_mask = _rasterize_single(tissue_polygon, (h, w))
    occupied = np.zeros((h, w), dtype=bool)
    regions = [Region(label=0, polygon=tissue_polygon)]
    for region_spec in spec.regions:
        regions.extend(_place_class(rng, region_spec, tissue_mask, occupied))

    annotations = AnnotationSet(regions=tuple(regions))
    truth = rasterize_annotations(annotations, w, h)
    image = _render_from_truth(truth, rng, (spec.tint_hue, spec.tint_sat, spec.tint_val))

    manifest = SlideManifest(
        slide_id=slide_id,
        width_px=w,
        height_px=h,
        magnification="40x",
        pixel_size_um=0.25,
        raster_path="slide.png",
        annotation_path="annotations.json",
    )
    save_slide(out_dir, manifest, image, annotations)
    save_raster(out_dir / "truth.png", truth)
    return Slide(manifest=manifest, image=image, annotations=annotations)


def load_truth(slide_dir: Path | str) -> np.ndarray:
    return load_label_raster(Path(slide_dir) / "truth.png")


def generate_patch(class_id: int, seed: int, tint=DEFAULT_TINT):
    """One 224 x 224 patch of a single class, for desk-scale experiments.

    Class 0 is plain tissue; artifact classes render one large blob
    (covering most of the patch) over tissue, like a grid cell sitting
    inside an artifact region. Returns (record, truth) where record is a
    labeled PatchRecord and truth the per-pixel class raster.
    """
    if not (0 <= class_id <= 5):
        raise ValueError(f"generate_patch: class_id {class_id} outside 0..5")
    rng = np.random.default_rng(seed)
    truth = np.zeros((STRIDE, STRIDE), dtype=np.uint8)
    if class_id > 0:
        polygon = _blob_polygon(
            rng,
            STRIDE / 2.0 + rng.uniform(-8.0, 8.0),
            STRIDE / 2.0 + rng.uniform(-8.0, 8.0),
            rng.uniform(135.0, 150.0),
        )
        _fill_polygon(truth, polygon, class_id)
    pixels = _render_from_truth(truth, rng, tint)
    record = PatchRecord(
        slide_id=f"patch_{class_id}_{seed}", x=0, y=0, pixels=pixels, label=class_id
    )
    return record, truth


def split_counts(n_slides: int, fractions) -> tuple:
    """Slide counts (train, val, test) for a corpus of n_slides.

    Validation and test sizes round half-up from their fractions; the
    remainder goes to train. Every split must end up non-empty, which
    requires at least 3 slides.
    """
    if n_slides < 3:
        raise ValueError(f"split_counts: need at least 3 slides, got {n_slides}")
    f_train, f_val, f_test = fractions
    if abs(f_train + f_val + f_test - 1.0) > 1e-9:
        raise ValueError(f"split_counts: fractions {fractions} do not sum to 1")
    n_val = int(math.floor(n_slides * f_val + 0.5))
    n_test = int(math.floor(n_slides * f_test + 0.5))
    n_train = n_slides - n_val - n_test
    if min(n_train, n_val, n_test) < 1:
        raise ValueError(
            f"split_counts: fractions {fractions} leave an empty split for "
            f"{n_slides} slides"
        )
    return n_train, n_val, n_test


def generate_corpus(
    root: Path | str,
    n_slides: int,
    split=(0.64, 0.18, 0.18),
    seed: int = 0,
    dims=(1568, 1792),
) -> dict:
    """Generate a slide corpus with per-split labeled patch datasets.

    Slides land under root/slides/<slide_id>/ and their labeled patches
    under root/{train,val,test}/<class_name>/. Every slide carries all
    five artifact classes at varied fractions, so each split holds
    examples of each class. Returns the corpus index, also written to
    root/corpus.json.
    """
    root = Path(root)
    n_train, n_val, n_test = split_counts(n_slides, split)
    rng = np.random.default_rng(seed)
    slide_seeds = rng.integers(0, 2**31 - 1, size=n_slides)

    split_names = (
        ["train"] * n_train + ["val"] * n_val + ["test"] * n_test
    )
    index = {
        "seed": seed,
        "n_slides": n_slides,
        "split_fractions": list(split),
        "slides": {"train": [], "val": [], "test": []},
        "patch_counts": {},
    }
    patch_counts = {name: {} for name in ("train", "val", "test")}
    for i in range(n_slides):
        dim = int(dims[int(rng.integers(len(dims)))])
        regions = tuple(
            RegionSpec(class_id=k, target_fraction=float(rng.uniform(0.05, 0.065)))
            for k in range(1, 6)
        )
        spec = SynthSpec(
            seed=int(slide_seeds[i]),
            width=dim,
            height=dim,
            regions=regions,
            tint_hue=float(rng.uniform(313.0, 337.0)),
            tint_sat=float(rng.uniform(0.33, 0.43)),
            tint_val=float(rng.uniform(0.68, 0.76)),
        )
        slide_id = f"synth_{i:03d}"
        slide = generate_slide(spec, root / "slides" / slide_id, slide_id=slide_id)
        truth = load_truth(root / "slides" / slide_id)

        split_name = split_names[i]
        index["slides"][split_name].append(slide_id)
        fg = extract_foreground(slide.image)
        # Harvest at 50% coverage so border cells (tissue against the
        # slide background) are labeled too. Inference classifies every
        # selected cell, so the training pool has to include them.
        plan = plan_grid(fg.mask, truth, min_overlap=0.5)
        patches = extract_patches(slide.image, plan, slide_id=slide_id)
        counts = save_patch_dataset(patches, root / split_name)
        for name, count in counts.items():
            patch_counts[split_name][name] = (
                patch_counts[split_name].get(name, 0) + count
            )
    index["patch_counts"] = patch_counts
    write_json(root / "corpus.json", index)
    return index
