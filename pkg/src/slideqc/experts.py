"""Patch classifiers: hand-crafted features, linear experts, backends.

Three model kinds share one forward interface:

    trained_feature_model   linear softmax over a 16-dim feature vector,
                            trained here, stored as JSON
    external_model          serialized network plus model_manifest.json,
                            run through a pluggable backend
    oracle                  truth-raster lookup, used for verification

Binary experts follow the convention class 0 = artifact, class 1 =
artifact-free, so probs[0] is always the artifact probability.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from slideqc.tiler import rgb_to_hsv_image
from slideqc.wsi_store import PATCH_SIZE, read_json, write_json

logger = logging.getLogger(__name__)

FEATURE_VERSION = 1
FEATURE_DIM = 16
PROB_FLOOR = 1e-12

FEATURE_NAMES = (
    "mean_r",
    "mean_g",
    "mean_b",
    "std_r",
    "std_g",
    "std_b",
    "mean_h",
    "mean_s",
    "mean_v",
    "std_h",
    "std_s",
    "std_v",
    "laplacian_var",
    "edge_density",
    "near_red_fraction",
    "near_white_fraction",
)


@dataclass(frozen=True)
class FeatureConfig:
    """Constants behind the feature vector.

    channel_mean / channel_std standardize the RGB channels before their
    mean/std features are taken; the defaults are the usual large-corpus
    image statistics. The remaining entries are plain thresholds for the
    edge and color-fraction features.
    """

    channel_mean: tuple = (0.485, 0.456, 0.406)
    channel_std: tuple = (0.229, 0.224, 0.225)
    edge_grad_threshold: float = 0.08
    near_red_hue_lo: float = 340.0
    near_red_hue_hi: float = 20.0
    near_red_min_sat: float = 0.45
    near_red_min_val: float = 0.25
    near_white_min_val: float = 0.80
    near_white_max_sat: float = 0.12


DEFAULT_FEATURES = FeatureConfig()
IDENTITY_FEATURES = FeatureConfig(channel_mean=(0.0, 0.0, 0.0), channel_std=(1.0, 1.0, 1.0))


def _laplacian(gray: np.ndarray) -> np.ndarray:
    # 4-neighbor Laplacian with edge replication.
    padded = np.pad(gray, 1, mode="edge")
    return (
        padded[:-2, 1:-1]
        + padded[2:, 1:-1]
        + padded[1:-1, :-2]
        + padded[1:-1, 2:]
        - 4.0 * gray
    )


def extract_features(patch, config: FeatureConfig = DEFAULT_FEATURES) -> np.ndarray:
    """16-dim feature vector for one patch (PatchRecord or HxWx3 uint8).

    Layout (see FEATURE_NAMES): standardized RGB channel means and stds,
    HSV channel means and stds (hue scaled to [0, 1]), Laplacian variance,
    edge density, near-red fraction, near-white fraction.
    """
    pixels = patch.pixels if hasattr(patch, "pixels") else patch
    pixels = np.asarray(pixels)
    if pixels.ndim != 3 or pixels.shape[2] != 3:
        raise ValueError(f"extract_features: expected HxWx3 pixels, got {pixels.shape}")

    rgb = pixels.astype(np.float64) / 255.0
    mean = np.asarray(config.channel_mean, dtype=np.float64)
    std = np.asarray(config.channel_std, dtype=np.float64)
    standardized = (rgb - mean) / std

    hsv = rgb_to_hsv_image(pixels)
    hue = hsv[..., 0] / 360.0
    sat = hsv[..., 1]
    val = hsv[..., 2]

    gray = rgb.mean(axis=-1)
    lap = _laplacian(gray)
    gy, gx = np.gradient(gray)
    grad_mag = np.sqrt(gx * gx + gy * gy)

    near_red = (
        ((hsv[..., 0] >= config.near_red_hue_lo) | (hsv[..., 0] <= config.near_red_hue_hi))
        & (sat >= config.near_red_min_sat)
        & (val >= config.near_red_min_val)
    )
    near_white = (val >= config.near_white_min_val) & (sat <= config.near_white_max_sat)

    features = np.empty(FEATURE_DIM, dtype=np.float64)
    features[0:3] = standardized.mean(axis=(0, 1))
    features[3:6] = standardized.std(axis=(0, 1))
    features[6:9] = [hue.mean(), sat.mean(), val.mean()]
    features[9:12] = [hue.std(), sat.std(), val.std()]
    features[12] = lap.var()
    features[13] = float(np.count_nonzero(grad_mag > config.edge_grad_threshold)) / gray.size
    features[14] = float(np.count_nonzero(near_red)) / gray.size
    features[15] = float(np.count_nonzero(near_white)) / gray.size
    return features


# ---------------------------------------------------------------------------
# linear softmax classifier
# ---------------------------------------------------------------------------


def softmax(logits: np.ndarray) -> np.ndarray:
    """Numerically stable softmax over the last axis."""
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(truth: int, probs: np.ndarray) -> float:
    """Negative log-probability of the true class, floored at 1e-12."""
    probs = np.asarray(probs)
    if not (0 <= truth < probs.shape[-1]):
        raise ValueError(f"cross_entropy: label {truth} outside {probs.shape[-1]} classes")
    return float(-math.log(max(float(probs[truth]), PROB_FLOOR)))


def _with_bias(features: np.ndarray) -> np.ndarray:
    features = np.atleast_2d(np.asarray(features, dtype=np.float64))
    return np.hstack([features, np.ones((features.shape[0], 1))])


def loss_and_grad(weights: np.ndarray, features: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy and its gradient for a weight matrix.

    weights is (class_count, FEATURE_DIM + 1), the trailing column being
    the bias. features is (n, FEATURE_DIM), labels (n,) integer classes.
    """
    weights = np.asarray(weights, dtype=np.float64)
    xb = _with_bias(features)
    labels = np.asarray(labels, dtype=np.int64)
    if xb.shape[1] != weights.shape[1]:
        raise ValueError(
            f"loss_and_grad: weights expect {weights.shape[1] - 1} features, "
            f"got {xb.shape[1] - 1}"
        )
    n = xb.shape[0]
    probs = softmax(xb @ weights.T)
    picked = np.maximum(probs[np.arange(n), labels], PROB_FLOOR)
    loss = float(-np.log(picked).mean())
    delta = probs.copy()
    delta[np.arange(n), labels] -= 1.0
    grad = delta.T @ xb / n
    return loss, grad


# ---------------------------------------------------------------------------
# models
# ---------------------------------------------------------------------------

KIND_TRAINED = "trained_feature_model"
KIND_EXTERNAL = "external_model"
KIND_ORACLE = "oracle"


@dataclass
class ExpertModel:
    """One classifier with a uniform forward interface.

    weights is set for trained models; backend/manifest for external ones;
    truth_lookup (cell coordinate -> class id) plus positive_class for
    oracle models, where positive_class None means multiclass output.
    """

    kind: str
    class_count: int
    weights: Optional[np.ndarray] = None
    manifest: Optional[dict] = None
    backend: Optional[object] = None
    truth_lookup: Optional[dict] = None
    positive_class: Optional[int] = None

    def __post_init__(self):
        if self.kind not in (KIND_TRAINED, KIND_EXTERNAL, KIND_ORACLE):
            raise ValueError(f"unknown model kind: {self.kind}")
        if self.class_count < 2:
            raise ValueError("class_count must be >= 2")
        if self.kind == KIND_TRAINED:
            expected = (self.class_count, FEATURE_DIM + 1)
            if self.weights is None or self.weights.shape != expected:
                raise ValueError(
                    f"trained model: expected weight shape {expected}, got "
                    f"{None if self.weights is None else self.weights.shape}"
                )


def oracle_expert(truth_lookup: dict, artifact_class: int) -> ExpertModel:
    """Binary oracle for one artifact class, backed by truth labels."""
    return ExpertModel(
        kind=KIND_ORACLE,
        class_count=2,
        truth_lookup=truth_lookup,
        positive_class=artifact_class,
    )


def oracle_multiclass(truth_lookup: dict, class_count: int = 6) -> ExpertModel:
    """Multiclass oracle emitting a one-hot of the truth label."""
    return ExpertModel(kind=KIND_ORACLE, class_count=class_count, truth_lookup=truth_lookup)


def _forward_oracle(model: ExpertModel, patch) -> np.ndarray:
    key = (int(patch.x), int(patch.y))
    if key not in model.truth_lookup:
        raise ValueError(f"oracle model: no truth label for cell {key}")
    truth = model.truth_lookup[key]
    if model.positive_class is None:
        probs = np.zeros(model.class_count)
        probs[truth] = 1.0
        return probs
    is_artifact = truth == model.positive_class
    return np.array([1.0, 0.0]) if is_artifact else np.array([0.0, 1.0])


def forward(model: ExpertModel, patch) -> np.ndarray:
    """Class probabilities for one patch."""
    if model.kind == KIND_ORACLE:
        return _forward_oracle(model, patch)
    if model.kind == KIND_TRAINED:
        logits = _with_bias(extract_features(patch)) @ model.weights.T
        return softmax(logits)[0]
    return _forward_external(model, [patch])[0]


def predict_batch(model: ExpertModel, patches, workers: int = 1) -> np.ndarray:
    """Probabilities for a patch sequence, order preserved.

    workers > 1 splits the batch into chunks handled by a thread pool and
    reassembles results in input order, so the output never depends on the
    worker count.
    """
    patches = list(patches)
    if not patches:
        return np.zeros((0, model.class_count))
    if model.kind == KIND_EXTERNAL:
        return _forward_external(model, patches)
    if workers <= 1 or len(patches) < 2:
        return np.stack([forward(model, p) for p in patches])
    from concurrent.futures import ThreadPoolExecutor

    chunks = np.array_split(np.arange(len(patches)), min(workers, len(patches)))
    def run(idx):
        return [forward(model, patches[i]) for i in idx]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        parts = list(pool.map(run, chunks))
    return np.stack([p for part in parts for p in part])


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.01
    batch_size: int = 128
    max_epochs: int = 500
    patience: int = 20
    plateau_patience: int = 5
    plateau_factor: float = 0.5
    seed: int = 0


@dataclass
class TrainHistory:
    epochs: list = field(default_factory=list)  # (epoch, train_loss, val_loss, lr)
    best_epoch: int = -1
    best_val_loss: float = math.inf


def train(
    train_features: np.ndarray,
    train_labels: np.ndarray,
    val_features: np.ndarray,
    val_labels: np.ndarray,
    class_count: int,
    config: TrainConfig = TrainConfig(),
):
    """Fit a linear softmax model with mini-batch SGD.

    Features are standardized with training-set statistics, and the learned
    weights are folded back so the stored matrix applies to raw features.
    The learning rate halves after plateau_patience epochs without a new
    best validation loss; training stops after patience such epochs. The
    weights returned are the best-validation snapshot.

    Returns (ExpertModel, TrainHistory). Deterministic for a fixed seed.
    """
    x_tr = np.asarray(train_features, dtype=np.float64)
    y_tr = np.asarray(train_labels, dtype=np.int64)
    x_va = np.asarray(val_features, dtype=np.float64)
    y_va = np.asarray(val_labels, dtype=np.int64)
    if x_tr.ndim != 2 or x_tr.shape[1] != FEATURE_DIM:
        raise ValueError(f"train: expected (n, {FEATURE_DIM}) features, got {x_tr.shape}")
    if x_tr.shape[0] != y_tr.shape[0] or x_va.shape[0] != y_va.shape[0]:
        raise ValueError("train: features and labels disagree in length")
    present = np.unique(y_tr)
    if len(present) < class_count or present.min() < 0 or present.max() >= class_count:
        raise ValueError(
            f"train: training labels must cover all {class_count} classes, "
            f"saw {sorted(int(c) for c in present)}"
        )

    mu = x_tr.mean(axis=0)
    sd = x_tr.std(axis=0)
    sd = np.where(sd > 0, sd, 1.0)
    z_tr = (x_tr - mu) / sd
    z_va = (x_va - mu) / sd

    rng = np.random.default_rng(config.seed)
    weights = np.zeros((class_count, FEATURE_DIM + 1))
    best_weights = weights.copy()
    history = TrainHistory()
    lr = config.learning_rate
    stale = 0
    plateau = 0
    n = z_tr.shape[0]

    for epoch in range(config.max_epochs):
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            batch = order[start : start + config.batch_size]
            _, grad = loss_and_grad(weights, z_tr[batch], y_tr[batch])
            if not np.all(np.isfinite(grad)):
                raise RuntimeError(f"train: non-finite gradient at epoch {epoch}")
            weights -= lr * grad
        train_loss, _ = loss_and_grad(weights, z_tr, y_tr)
        val_loss, _ = loss_and_grad(weights, z_va, y_va)
        history.epochs.append((epoch, train_loss, val_loss, lr))
        if val_loss < history.best_val_loss:
            history.best_val_loss = val_loss
            history.best_epoch = epoch
            best_weights = weights.copy()
            stale = 0
            plateau = 0
        else:
            stale += 1
            plateau += 1
            if plateau >= config.plateau_patience:
                lr *= config.plateau_factor
                plateau = 0
            if stale >= config.patience:
                break

    raw = np.empty_like(best_weights)
    raw[:, :FEATURE_DIM] = best_weights[:, :FEATURE_DIM] / sd
    raw[:, FEATURE_DIM] = best_weights[:, FEATURE_DIM] - (
        best_weights[:, :FEATURE_DIM] * (mu / sd)
    ).sum(axis=1)
    model = ExpertModel(kind=KIND_TRAINED, class_count=class_count, weights=raw)
    return model, history


# ---------------------------------------------------------------------------
# model files
# ---------------------------------------------------------------------------


def save_model(model: ExpertModel, path: Path | str) -> None:
    if model.kind != KIND_TRAINED:
        raise ValueError(f"save_model: cannot serialize kind {model.kind}")
    write_json(
        path,
        {
            "kind": KIND_TRAINED,
            "class_count": model.class_count,
            "weights": [[float(w) for w in row] for row in model.weights],
            "feature_version": FEATURE_VERSION,
        },
    )


def load_model(path: Path | str) -> ExpertModel:
    d = read_json(path)
    if d.get("kind") != KIND_TRAINED:
        raise ValueError(f"load_model: unexpected kind {d.get('kind')!r} in {path}")
    if d.get("feature_version") != FEATURE_VERSION:
        raise ValueError(
            f"load_model: feature_version {d.get('feature_version')} unsupported "
            f"(expected {FEATURE_VERSION})"
        )
    weights = np.asarray(d["weights"], dtype=np.float64)
    return ExpertModel(kind=KIND_TRAINED, class_count=int(d["class_count"]), weights=weights)


# ---------------------------------------------------------------------------
# external backends
# ---------------------------------------------------------------------------

_BACKEND_SUFFIXES = (".pt", ".pth", ".ts", ".onnx")


class _TorchscriptBackend:
    def __init__(self, path: Path):
        try:
            import torch
        except ImportError as exc:  # pragma: no cover
            raise RuntimeError(
                "external model backend unavailable: install torch to run "
                f"{path.name}"
            ) from exc
        self._torch = torch
        try:
            self._module = torch.jit.load(str(path), map_location="cpu")
        except Exception as exc:
            raise ValueError(f"unreadable external model {path}: {exc}") from exc
        self._module.eval()

    def __call__(self, batch: np.ndarray) -> np.ndarray:
        tensor = self._torch.from_numpy(batch.astype(np.float32))
        with self._torch.no_grad():
            out = self._module(tensor)
        return out.detach().cpu().numpy().astype(np.float64)


class _OnnxBackend:
    def __init__(self, path: Path):
        try:
            import onnxruntime
        except ImportError as exc:  # pragma: no cover
            raise RuntimeError(
                "external model backend unavailable: install onnxruntime to run "
                f"{path.name}"
            ) from exc
        try:
            self._session = onnxruntime.InferenceSession(str(path))
        except Exception as exc:
            raise ValueError(f"unreadable external model {path}: {exc}") from exc
        self._input = self._session.get_inputs()[0].name

    def __call__(self, batch: np.ndarray) -> np.ndarray:
        out = self._session.run(None, {self._input: batch.astype(np.float32)})[0]
        return np.asarray(out, dtype=np.float64)


def _patch_batch(patches) -> np.ndarray:
    # Layout: NCHW float32 in [0, 1].
    arrays = []
    for patch in patches:
        pixels = patch.pixels if hasattr(patch, "pixels") else patch
        arrays.append(np.transpose(np.asarray(pixels, dtype=np.float64) / 255.0, (2, 0, 1)))
    return np.stack(arrays)


def _forward_external(model: ExpertModel, patches) -> np.ndarray:
    logits = model.backend(_patch_batch(patches))
    if logits.ndim != 2 or logits.shape[1] != model.class_count:
        raise ValueError(
            f"external model: backend returned shape {logits.shape}, expected "
            f"(n, {model.class_count})"
        )
    return softmax(logits)


def load_external(model_dir: Path | str) -> ExpertModel:
    """Load an external model directory: network file + model_manifest.json.

    The manifest must declare class_count, param_count and flop_count. The
    network file is found by suffix (.pt/.pth/.ts for torchscript, .onnx
    for ONNX) or named explicitly under the manifest key "model_path". A
    probe forward runs at load time so a class-count mismatch fails here
    rather than mid-pipeline.
    """
    model_dir = Path(model_dir)
    manifest_path = model_dir / "model_manifest.json"
    if not manifest_path.is_file():
        raise FileNotFoundError(f"external model: missing {manifest_path}")
    manifest = read_json(manifest_path)
    for key in ("class_count", "param_count", "flop_count"):
        if key not in manifest:
            raise ValueError(f"external model manifest: missing key {key!r}")
    class_count = int(manifest["class_count"])
    if class_count < 2:
        raise ValueError("external model manifest: class_count must be >= 2")

    if "model_path" in manifest:
        candidates = [model_dir / manifest["model_path"]]
    else:
        candidates = sorted(
            p for p in model_dir.iterdir() if p.suffix in _BACKEND_SUFFIXES
        )
    if not candidates:
        raise FileNotFoundError(f"external model: no network file in {model_dir}")
    path = candidates[0]
    if not path.is_file():
        raise FileNotFoundError(f"external model: missing network file {path}")
    backend = _OnnxBackend(path) if path.suffix == ".onnx" else _TorchscriptBackend(path)

    model = ExpertModel(
        kind=KIND_EXTERNAL, class_count=class_count, manifest=manifest, backend=backend
    )
    probe = np.zeros((PATCH_SIZE, PATCH_SIZE, 3), dtype=np.uint8)
    out = backend(_patch_batch([probe]))
    if out.ndim != 2 or out.shape[1] != class_count:
        raise ValueError(
            f"external model: manifest declares {class_count} classes but the "
            f"network emits shape {out.shape}"
        )
    labels = manifest.get("labels")
    if labels is not None and class_count == 2 and labels.get("0") != "artifact":
        logger.warning(
            "external model: binary label map %s does not follow the "
            "0=artifact convention",
            labels,
        )
    return model
