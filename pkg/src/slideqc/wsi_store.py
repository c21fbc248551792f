"""Slide directories, polygon annotations, and patch datasets.

A slide lives in a single directory:

    slide_dir/
        manifest.json       dimensions, pixel size, file references
        <raster_path>       RGB PNG named by the manifest
        <annotation_path>   optional polygon annotations (JSON)

Annotations are labeled polygons in slide pixel coordinates. They can be
rasterized to a per-pixel label image where 255 marks unlabeled pixels.

Patch datasets use one subdirectory per class name, with each patch saved
as "<slide_id>_<x>_<y>.png".
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional

import numpy as np
from PIL import Image

PATCH_SIZE = 224
UNLABELED = 255

CLASS_NAMES = ("artifact_free", "blood", "blur", "bubble", "damage", "fold")
N_CLASSES = len(CLASS_NAMES)
CLASS_IDS = {name: i for i, name in enumerate(CLASS_NAMES)}
ARTIFACT_CLASSES = tuple(range(1, N_CLASSES))


def write_json(path: Path | str, obj) -> None:
    """Write JSON with sorted keys and a trailing newline.

    Every JSON artifact in the pipeline goes through this helper so that
    reruns with identical inputs produce byte-identical files.
    """
    text = json.dumps(obj, indent=2, sort_keys=True) + "\n"
    Path(path).write_text(text, encoding="utf-8")


def read_json(path: Path | str):
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"missing JSON file: {path}")
    with path.open("r", encoding="utf-8") as fh:
        return json.load(fh)


# ---------------------------------------------------------------------------
# manifest and annotations
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SlideManifest:
    """Slide metadata stored as manifest.json inside the slide directory."""

    slide_id: str
    width_px: int
    height_px: int
    magnification: str
    pixel_size_um: float
    raster_path: str
    annotation_path: Optional[str] = None

    def __post_init__(self):
        if not self.slide_id:
            raise ValueError("manifest: slide_id must be non-empty")
        if self.width_px < 1 or self.height_px < 1:
            raise ValueError(
                f"manifest: dimensions must be positive, got "
                f"{self.width_px}x{self.height_px}"
            )
        if not (self.pixel_size_um > 0):
            raise ValueError("manifest: pixel_size_um must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "SlideManifest":
        try:
            return cls(
                slide_id=d["slide_id"],
                width_px=int(d["width_px"]),
                height_px=int(d["height_px"]),
                magnification=str(d["magnification"]),
                pixel_size_um=float(d["pixel_size_um"]),
                raster_path=d["raster_path"],
                annotation_path=d.get("annotation_path"),
            )
        except KeyError as exc:
            raise ValueError(f"manifest: missing required key {exc}") from exc

    def to_dict(self) -> dict:
        d = {
            "slide_id": self.slide_id,
            "width_px": self.width_px,
            "height_px": self.height_px,
            "magnification": self.magnification,
            "pixel_size_um": self.pixel_size_um,
            "raster_path": self.raster_path,
        }
        if self.annotation_path is not None:
            d["annotation_path"] = self.annotation_path
        return d


@dataclass(frozen=True)
class Region:
    """One labeled polygon. Vertices are (x, y) in slide pixels."""

    label: int
    polygon: tuple

    def __post_init__(self):
        if not (0 <= self.label < N_CLASSES):
            raise ValueError(f"annotation region: unknown label id {self.label}")
        if len(self.polygon) < 3:
            raise ValueError(
                f"annotation region: polygon needs >= 3 vertices, got "
                f"{len(self.polygon)}"
            )


@dataclass(frozen=True)
class AnnotationSet:
    regions: tuple

    @classmethod
    def from_dict(cls, d: dict) -> "AnnotationSet":
        regions = []
        for entry in d.get("regions", []):
            polygon = tuple((float(x), float(y)) for x, y in entry["polygon"])
            regions.append(Region(label=int(entry["label"]), polygon=polygon))
        return cls(regions=tuple(regions))

    def to_dict(self) -> dict:
        return {
            "regions": [
                {"label": r.label, "polygon": [[x, y] for x, y in r.polygon]}
                for r in self.regions
            ]
        }


@dataclass
class PatchRecord:
    """One 224 x 224 RGB patch cut from a slide at top-left (x, y)."""

    slide_id: str
    x: int
    y: int
    pixels: np.ndarray
    label: Optional[int] = None
    size: int = PATCH_SIZE

    def __post_init__(self):
        if self.pixels.shape != (self.size, self.size, 3):
            raise ValueError(
                f"patch {self.slide_id}_{self.x}_{self.y}: expected "
                f"{self.size}x{self.size}x3 pixels, got {self.pixels.shape}"
            )
        if self.label is not None and not (0 <= self.label < N_CLASSES):
            raise ValueError(f"patch: unknown label id {self.label}")

    @property
    def filename(self) -> str:
        return f"{self.slide_id}_{self.x}_{self.y}.png"


@dataclass
class Slide:
    manifest: SlideManifest
    image: np.ndarray
    annotations: Optional[AnnotationSet] = None


# ---------------------------------------------------------------------------
# slide I/O
# ---------------------------------------------------------------------------


def load_raster(path: Path | str) -> np.ndarray:
    """Load an RGB PNG as a (height, width, 3) uint8 array."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"missing raster: {path}")
    with Image.open(path) as img:
        arr = np.asarray(img.convert("RGB"), dtype=np.uint8)
    return arr


def load_label_raster(path: Path | str) -> np.ndarray:
    """Load a single-channel PNG of class ids as a (height, width) uint8 array."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"missing label raster: {path}")
    with Image.open(path) as img:
        arr = np.asarray(img)
    if arr.ndim != 2:
        raise ValueError(f"label raster {path} is not single-channel: {arr.shape}")
    return arr.astype(np.uint8)


def save_raster(path: Path | str, image: np.ndarray) -> None:
    image = np.asarray(image)
    if image.ndim == 2:
        Image.fromarray(image.astype(np.uint8), mode="L").save(path)
        return
    if image.ndim != 3 or image.shape[2] != 3 or image.dtype != np.uint8:
        raise ValueError(f"save_raster: expected HxWx3 uint8, got {image.shape} {image.dtype}")
    Image.fromarray(image, mode="RGB").save(path)


def load_slide(slide_dir: Path | str) -> Slide:
    """Load manifest, raster, and (when referenced) annotations.

    Raises FileNotFoundError for missing files and ValueError when the
    raster dimensions disagree with the manifest.
    """
    slide_dir = Path(slide_dir)
    manifest = SlideManifest.from_dict(read_json(slide_dir / "manifest.json"))
    image = load_raster(slide_dir / manifest.raster_path)
    h, w = image.shape[:2]
    if (w, h) != (manifest.width_px, manifest.height_px):
        raise ValueError(
            f"slide {manifest.slide_id}: raster is {w}x{h} but manifest says "
            f"{manifest.width_px}x{manifest.height_px}"
        )
    annotations = None
    if manifest.annotation_path is not None:
        annotations = AnnotationSet.from_dict(
            read_json(slide_dir / manifest.annotation_path)
        )
    return Slide(manifest=manifest, image=image, annotations=annotations)


def save_slide(
    slide_dir: Path | str,
    manifest: SlideManifest,
    image: np.ndarray,
    annotations: Optional[AnnotationSet] = None,
) -> None:
    """Write a slide directory in the layout load_slide expects."""
    slide_dir = Path(slide_dir)
    slide_dir.mkdir(parents=True, exist_ok=True)
    if annotations is not None and manifest.annotation_path is None:
        raise ValueError("save_slide: annotations given but manifest has no annotation_path")
    save_raster(slide_dir / manifest.raster_path, image)
    if annotations is not None:
        write_json(slide_dir / manifest.annotation_path, annotations.to_dict())
    write_json(slide_dir / "manifest.json", manifest.to_dict())


# ---------------------------------------------------------------------------
# polygon rasterization
# ---------------------------------------------------------------------------


def _fill_polygon(target: np.ndarray, polygon, label: int) -> None:
    # Scanline fill with the even-odd rule, evaluated at pixel centers.
    # A pixel (row, col) is inside when the point (col + 0.5, row + 0.5)
    # crosses the boundary an odd number of times.
    poly = np.asarray(polygon, dtype=np.float64)
    h, w = target.shape
    x1, y1 = poly[:, 0], poly[:, 1]
    x2, y2 = np.roll(x1, -1), np.roll(y1, -1)
    row_lo = max(0, int(math.floor(y1.min() - 1.0)))
    row_hi = min(h - 1, int(math.ceil(y1.max() + 1.0)))
    for row in range(row_lo, row_hi + 1):
        yc = row + 0.5
        hit = ((y1 <= yc) & (y2 > yc)) | ((y2 <= yc) & (y1 > yc))
        if not hit.any():
            continue
        xs = x1[hit] + (yc - y1[hit]) * (x2[hit] - x1[hit]) / (y2[hit] - y1[hit])
        xs.sort()
        for xa, xb in zip(xs[0::2], xs[1::2]):
            col_lo = max(0, int(math.ceil(xa - 0.5)))
            col_hi = min(w, int(math.ceil(xb - 0.5)))
            if col_hi > col_lo:
                target[row, col_lo:col_hi] = label


def rasterize_annotations(
    annotations: AnnotationSet, width: int, height: int
) -> np.ndarray:
    """Rasterize polygons to a (height, width) uint8 label image.

    Pixels outside every region hold 255. Regions are painted in listing
    order, so where regions overlap the last one wins. Polygons reaching
    outside the canvas are clipped.
    """
    if width < 1 or height < 1:
        raise ValueError("rasterize_annotations: non-positive dimensions")
    out = np.full((height, width), UNLABELED, dtype=np.uint8)
    for region in annotations.regions:
        _fill_polygon(out, region.polygon, region.label)
    return out


# ---------------------------------------------------------------------------
# patch datasets
# ---------------------------------------------------------------------------


def save_patch_dataset(patches: Iterable[PatchRecord], root: Path | str) -> dict:
    """Write labeled patches into per-class directories under root.

    Returns a per-class-name count dict. Every class directory is created
    even when it receives no patches, so an empty input still produces the
    full layout with all counts at zero. Unlabeled patches are rejected.
    """
    root = Path(root)
    counts = {name: 0 for name in CLASS_NAMES}
    for name in CLASS_NAMES:
        (root / name).mkdir(parents=True, exist_ok=True)
    for patch in patches:
        if patch.label is None:
            raise ValueError(
                f"save_patch_dataset: patch {patch.slide_id}_{patch.x}_{patch.y} "
                "has no label"
            )
        name = CLASS_NAMES[patch.label]
        save_raster(root / name / patch.filename, patch.pixels)
        counts[name] += 1
    return counts


def _parse_patch_name(filename: str):
    stem = filename[:-4] if filename.endswith(".png") else filename
    slide_id, x, y = stem.rsplit("_", 2)
    return slide_id, int(x), int(y)


def load_patch_dataset(root: Path | str) -> list:
    """Load a per-class patch directory back into PatchRecords.

    Patches come back ordered by (class id, filename) so repeated loads
    enumerate the dataset identically.
    """
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"missing patch dataset: {root}")
    records = []
    for label, name in enumerate(CLASS_NAMES):
        class_dir = root / name
        if not class_dir.is_dir():
            continue
        for path in sorted(class_dir.glob("*.png")):
            slide_id, x, y = _parse_patch_name(path.name)
            records.append(
                PatchRecord(
                    slide_id=slide_id, x=x, y=y, pixels=load_raster(path), label=label
                )
            )
    return records
