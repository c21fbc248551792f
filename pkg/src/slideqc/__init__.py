"""slideqc: patch-based quality control for large stained-tissue images.

The pipeline tiles a slide into 224 x 224 patches, scores each patch with
a mixture of binary artifact experts (or one multiclass model), calibrates
the accept threshold for a target sensitivity, and emits a segmentation
matrix, a QC report, and an artifact-free region mask.
"""

__version__ = "0.1.0"

from slideqc.wsi_store import (  # noqa: F401
    CLASS_NAMES,
    PATCH_SIZE,
    UNLABELED,
    PatchRecord,
    Slide,
    SlideManifest,
    load_slide,
)
