"""Mixture-of-experts fusion and per-slide classification.

Five binary experts, one per artifact class in the fixed order blood,
blur, bubble, damage, fold, each emit an artifact probability for a patch.
Fusion takes the most confident artifact vote: the fused artifact
probability is the maximum over experts, and the artifact-free probability
is its complement. A patch is accepted as artifact-free when that
complement reaches the operating threshold t_s; otherwise it is assigned
to the expert with the strongest artifact claim.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from slideqc.experts import ExpertModel, forward
from slideqc.wsi_store import ARTIFACT_CLASSES

N_EXPERTS = len(ARTIFACT_CLASSES)
EXPERT_ORDER = ("blood", "blur", "bubble", "damage", "fold")


@dataclass
class FusedPrediction:
    """Max-fused expert outputs for one patch."""

    p_artifact_free: float
    p_artifact: float
    per_expert_artifact: np.ndarray
    label: Optional[int] = None


@dataclass
class MoEConfig:
    """Five binary experts (blood, blur, bubble, damage, fold) plus t_s."""

    experts: list
    t_s: float

    def __post_init__(self):
        if len(self.experts) != N_EXPERTS:
            raise ValueError(
                f"MoEConfig: expected {N_EXPERTS} experts, got {len(self.experts)}"
            )
        for name, expert in zip(EXPERT_ORDER, self.experts):
            if expert.class_count != 2:
                raise ValueError(
                    f"MoEConfig: {name} expert must be binary, has "
                    f"{expert.class_count} classes"
                )
        if not (0.0 <= self.t_s <= 1.0):
            raise ValueError(f"MoEConfig: t_s {self.t_s} outside [0, 1]")


def fuse(expert_probs) -> FusedPrediction:
    """Fuse five binary probability vectors into one patch prediction.

    Each vector is (p_artifact, p_artifact_free). The fused artifact
    probability is the maximum of the artifact entries; the artifact-free
    probability is exactly 1 minus that maximum.
    """
    if len(expert_probs) != N_EXPERTS:
        raise ValueError(f"fuse: expected {N_EXPERTS} probability vectors")
    per_expert = np.empty(N_EXPERTS, dtype=np.float64)
    for i, probs in enumerate(expert_probs):
        probs = np.asarray(probs, dtype=np.float64)
        if probs.shape != (2,):
            raise ValueError(
                f"fuse: expert {i} emitted shape {probs.shape}, expected (2,)"
            )
        per_expert[i] = probs[0]
    p_artifact = float(per_expert.max())
    return FusedPrediction(
        p_artifact_free=1.0 - p_artifact,
        p_artifact=p_artifact,
        per_expert_artifact=per_expert,
    )


def decide_moe(fused: FusedPrediction, t_s: float) -> int:
    """Label a fused prediction: 0 when p_artifact_free >= t_s, else the
    artifact class whose expert is most confident (ties to the smallest
    class id)."""
    if not (0.0 <= t_s <= 1.0):
        raise ValueError(f"decide_moe: t_s {t_s} outside [0, 1]")
    if fused.p_artifact_free >= t_s:
        return 0
    return 1 + int(np.argmax(fused.per_expert_artifact))


def decide_multiclass(probs: np.ndarray, t_s: float) -> int:
    """Label a 6-class probability vector: 0 when probs[0] >= t_s, else the
    most probable artifact class."""
    probs = np.asarray(probs, dtype=np.float64)
    if probs.shape != (6,):
        raise ValueError(f"decide_multiclass: expected 6 classes, got {probs.shape}")
    if not (0.0 <= t_s <= 1.0):
        raise ValueError(f"decide_multiclass: t_s {t_s} outside [0, 1]")
    if probs[0] >= t_s:
        return 0
    return 1 + int(np.argmax(probs[1:]))


# ---------------------------------------------------------------------------
# slide-level classification
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Decision:
    """Final per-patch outcome at grid cell (x, y)."""

    x: int
    y: int
    label: int
    p_free: float


def _classify_one_moe(patch, config: MoEConfig) -> Decision:
    fused = fuse([forward(e, patch) for e in config.experts])
    return Decision(
        x=patch.x,
        y=patch.y,
        label=decide_moe(fused, config.t_s),
        p_free=fused.p_artifact_free,
    )


def _classify_one_multiclass(patch, model: ExpertModel, t_s: float) -> Decision:
    probs = forward(model, patch)
    return Decision(
        x=patch.x,
        y=patch.y,
        label=decide_multiclass(probs, t_s),
        p_free=float(probs[0]),
    )


def _run_ordered(patches, worker_fn, workers: int) -> list:
    if workers <= 1 or len(patches) < 2:
        decisions = [worker_fn(p) for p in patches]
    else:
        from concurrent.futures import ThreadPoolExecutor

        chunks = np.array_split(np.arange(len(patches)), min(workers, len(patches)))
        def run(idx):
            return [worker_fn(patches[i]) for i in idx]
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(run, chunks))
        decisions = [d for part in parts for d in part]
    return sorted(decisions, key=lambda d: (d.y, d.x))


def classify_patches_moe(patches, config: MoEConfig, workers: int = 1) -> list:
    """Decisions for every patch under the expert mixture, sorted (y, x).

    The worker count only chunks the work; results are identical for any
    value.
    """
    patches = list(patches)
    return _run_ordered(patches, lambda p: _classify_one_moe(p, config), workers)


def classify_patches_multiclass(
    patches, model: ExpertModel, t_s: float, workers: int = 1
) -> list:
    """Decisions for every patch under one multiclass model, sorted (y, x)."""
    if model.class_count != 6:
        raise ValueError(
            f"classify_patches_multiclass: model has {model.class_count} classes, "
            "expected 6"
        )
    patches = list(patches)
    return _run_ordered(
        patches, lambda p: _classify_one_multiclass(p, model, t_s), workers
    )


# ---------------------------------------------------------------------------
# decision files
# ---------------------------------------------------------------------------


def write_decisions(decisions, path: Path | str) -> None:
    """Write decisions as JSON lines: {"x", "y", "label", "p_free"}."""
    lines = []
    for d in decisions:
        lines.append(
            json.dumps(
                {"x": d.x, "y": d.y, "label": d.label, "p_free": d.p_free},
                sort_keys=True,
            )
        )
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")


def read_decisions(path: Path | str) -> list:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"missing decisions file: {path}")
    decisions = []
    for line in path.read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        d = json.loads(line)
        decisions.append(
            Decision(
                x=int(d["x"]), y=int(d["y"]), label=int(d["label"]),
                p_free=float(d["p_free"]),
            )
        )
    return decisions
