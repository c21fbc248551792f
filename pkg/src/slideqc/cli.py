"""slideqc command line.

Subcommands cover the full pipeline: synth (make a synthetic slide or
corpus), tile (grid a slide into patches), train (fit one expert or the
multiclass model), calibrate (pick the operating threshold), infer (run
QC on a slide), eval (score results against truth), bench (throughput and
complexity per model).

Exit codes: 0 success, 2 validation problems (bad flags, missing or
malformed inputs), 1 runtime failures. Option values resolve as CLI flag,
then config file (--config, JSON), then built-in default; the worker
count additionally falls back to the SLIDEQC_WORKERS environment
variable.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from slideqc import calibration, metrics, moe, postprocess, synthgen, tiler
from slideqc import experts as experts_mod
from slideqc import wsi_store

logger = logging.getLogger("slideqc")

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2

CONFIG_KEYS = {
    "min_fg_fraction",
    "min_overlap",
    "tau",
    "fill",
    "workers",
    "target_sensitivity",
    "close_kernel",
    "repeats",
    "seed",
}

MULTICLASS_NAME = "multiclass"


def _load_config(path):
    if path is None:
        return {}
    config = wsi_store.read_json(path)
    if not isinstance(config, dict):
        raise ValueError(f"config file {path}: expected a JSON object")
    unknown = set(config) - CONFIG_KEYS
    if unknown:
        raise ValueError(
            f"config file {path}: unknown keys {sorted(unknown)}; "
            f"known keys are {sorted(CONFIG_KEYS)}"
        )
    return config


def _resolve(flag_value, config, key, default):
    if flag_value is not None:
        return flag_value
    if key in config:
        return config[key]
    return default


def _resolve_workers(flag_value, config):
    value = _resolve(flag_value, config, "workers", None)
    if value is None:
        value = os.environ.get("SLIDEQC_WORKERS", 1)
    workers = int(value)
    if workers < 1:
        raise ValueError(f"workers must be >= 1, got {workers}")
    return workers


def _output_file(path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


# ---------------------------------------------------------------------------
# model loading helpers
# ---------------------------------------------------------------------------


def _load_named_model(models_dir: Path, name: str):
    file_path = models_dir / f"{name}.json"
    dir_path = models_dir / name
    if file_path.is_file():
        return experts_mod.load_model(file_path)
    if dir_path.is_dir():
        return experts_mod.load_external(dir_path)
    raise FileNotFoundError(
        f"no model named {name!r} in {models_dir} (expected {name}.json or {name}/)"
    )


def _load_expert_set(models_dir: Path) -> list:
    models_dir = Path(models_dir)
    if not models_dir.is_dir():
        raise FileNotFoundError(f"missing models directory: {models_dir}")
    return [_load_named_model(models_dir, name) for name in moe.EXPERT_ORDER]


def _oracle_lookup(slide_dir: Path, cells) -> dict:
    truth = synthgen.load_truth(slide_dir)
    labels = tiler.dominant_cell_labels(truth, cells)
    lookup = {}
    for (x, y), label in zip(cells, labels):
        if label is not None:
            lookup[(x, y)] = label
    return lookup


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_synth(args, config):
    spec_dict = wsi_store.read_json(args.spec)
    kind = spec_dict.get("kind", "slide")
    out = Path(args.out)
    if kind == "slide":
        regions = tuple(
            synthgen.RegionSpec(
                class_id=int(r["class_id"]),
                target_fraction=float(r["target_fraction"]),
            )
            for r in spec_dict.get("regions", [])
        )
        tint = spec_dict.get("tint", {})
        spec = synthgen.SynthSpec(
            seed=int(spec_dict["seed"]),
            width=int(spec_dict.get("width", 1344)),
            height=int(spec_dict.get("height", 1344)),
            regions=regions,
            tint_hue=float(tint.get("hue", synthgen.DEFAULT_TINT[0])),
            tint_sat=float(tint.get("sat", synthgen.DEFAULT_TINT[1])),
            tint_val=float(tint.get("val", synthgen.DEFAULT_TINT[2])),
        )
        slide = synthgen.generate_slide(spec, out, slide_id=spec_dict.get("slide_id"))
        print(f"generated slide {slide.manifest.slide_id} in {out}")
    elif kind == "corpus":
        index = synthgen.generate_corpus(
            out,
            n_slides=int(spec_dict["n_slides"]),
            split=tuple(spec_dict.get("split", (0.64, 0.18, 0.18))),
            seed=int(spec_dict.get("seed", _resolve(None, config, "seed", 0))),
            dims=tuple(spec_dict.get("dims", (1344, 1568))),
        )
        sizes = {k: len(v) for k, v in index["slides"].items()}
        print(f"generated corpus of {index['n_slides']} slides in {out}: {sizes}")
    else:
        raise ValueError(f"synth spec: unknown kind {kind!r} (use 'slide' or 'corpus')")
    return EXIT_OK


def cmd_tile(args, config):
    min_fg = float(_resolve(args.min_fg, config, "min_fg_fraction", tiler.DEFAULT_MIN_FG_FRACTION))
    min_overlap = float(_resolve(args.min_overlap, config, "min_overlap", tiler.DEFAULT_MIN_OVERLAP))
    workers = _resolve_workers(args.workers, config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    slide = wsi_store.load_slide(args.slide)
    fg = tiler.extract_foreground(slide.image)
    annotation_raster = None
    if slide.annotations is not None:
        annotation_raster = wsi_store.rasterize_annotations(
            slide.annotations, slide.manifest.width_px, slide.manifest.height_px
        )
    plan = tiler.plan_grid(
        fg.mask, annotation_raster, min_fg_fraction=min_fg, min_overlap=min_overlap
    )
    plan.save(out / "plan.json")
    patches = tiler.extract_patches(slide.image, plan, slide_id=slide.manifest.slide_id)

    if annotation_raster is not None:
        counts = _save_patches_parallel(patches, out / "patches", workers)
        print(
            f"tiled {slide.manifest.slide_id}: {len(patches)} labeled patches "
            f"{counts} -> {out}"
        )
    else:
        flat = out / "unlabeled"
        flat.mkdir(parents=True, exist_ok=True)
        for patch in patches:
            wsi_store.save_raster(flat / patch.filename, patch.pixels)
        print(f"tiled {slide.manifest.slide_id}: {len(patches)} patches -> {flat}")
    return EXIT_OK


def _save_patches_parallel(patches, root, workers):
    root = Path(root)
    if workers <= 1 or len(patches) < 2:
        return wsi_store.save_patch_dataset(patches, root)
    from concurrent.futures import ThreadPoolExecutor

    for name in wsi_store.CLASS_NAMES:
        (root / name).mkdir(parents=True, exist_ok=True)
    counts = {name: 0 for name in wsi_store.CLASS_NAMES}
    def save_one(patch):
        if patch.label is None:
            raise ValueError("tile: unlabeled patch in labeled dataset")
        name = wsi_store.CLASS_NAMES[patch.label]
        wsi_store.save_raster(root / name / patch.filename, patch.pixels)
        return name
    with ThreadPoolExecutor(max_workers=workers) as pool:
        for name in pool.map(save_one, patches):
            counts[name] += 1
    return counts


def _dataset_features(records, task):
    """Map patch records to (features, labels) for a training task.

    Binary tasks use label 0 for the artifact class and 1 for
    artifact-free. The multiclass task keeps the stored class ids.
    """
    features = []
    labels = []
    if task == MULTICLASS_NAME:
        for record in records:
            features.append(experts_mod.extract_features(record))
            labels.append(record.label)
    else:
        artifact_id = wsi_store.CLASS_IDS[task]
        for record in records:
            if record.label == artifact_id:
                labels.append(0)
            elif record.label == 0:
                labels.append(1)
            else:
                continue
            features.append(experts_mod.extract_features(record))
    return np.array(features), np.array(labels, dtype=np.int64)


def cmd_train(args, config):
    root = Path(args.patches)
    seed = int(_resolve(args.seed, config, "seed", 0))
    task = args.task
    class_count = 6 if task == MULTICLASS_NAME else 2

    if (root / "train").is_dir() and (root / "val").is_dir():
        train_records = wsi_store.load_patch_dataset(root / "train")
        val_records = wsi_store.load_patch_dataset(root / "val")
    else:
        records = wsi_store.load_patch_dataset(root)
        if not records:
            raise ValueError(f"train: no patches under {root}")
        rng = np.random.default_rng(seed)
        order = rng.permutation(len(records))
        n_val = max(1, int(0.2 * len(records)))
        val_idx = set(int(i) for i in order[:n_val])
        train_records = [r for i, r in enumerate(records) if i not in val_idx]
        val_records = [r for i, r in enumerate(records) if i in val_idx]

    x_tr, y_tr = _dataset_features(train_records, task)
    x_va, y_va = _dataset_features(val_records, task)
    if len(x_tr) == 0 or len(x_va) == 0:
        raise ValueError(f"train: task {task} has an empty split under {root}")

    model, history = experts_mod.train(
        x_tr, y_tr, x_va, y_va, class_count,
        experts_mod.TrainConfig(seed=seed),
    )
    experts_mod.save_model(model, _output_file(args.out))
    probs = experts_mod.softmax(
        np.hstack([x_va, np.ones((len(x_va), 1))]) @ model.weights.T
    )
    val_acc = float((probs.argmax(axis=1) == y_va).mean())
    print(
        f"trained {task}: best epoch {history.best_epoch} "
        f"(val loss {history.best_val_loss:.4f}, val acc {val_acc:.3f}) -> {args.out}"
    )
    return EXIT_OK


def _scored_patches(models_dir, patch_root, mode, workers):
    records = wsi_store.load_patch_dataset(patch_root)
    if not records:
        raise ValueError(f"no patches under {patch_root}")
    if mode == "moe":
        expert_models = _load_expert_set(models_dir)
        per_expert = [
            experts_mod.predict_batch(model, records, workers=workers)
            for model in expert_models
        ]
        scored = []
        for i, record in enumerate(records):
            fused = moe.fuse([probs[i] for probs in per_expert])
            scored.append((fused.p_artifact_free, 1 if record.label == 0 else 0))
    else:
        model = _load_named_model(Path(models_dir), MULTICLASS_NAME)
        probs = experts_mod.predict_batch(model, records, workers=workers)
        scored = [
            (float(p[0]), 1 if record.label == 0 else 0)
            for p, record in zip(probs, records)
        ]
    return scored


def cmd_calibrate(args, config):
    target = float(
        _resolve(
            args.target_sens, config, "target_sensitivity",
            calibration.DEFAULT_TARGET_SENSITIVITY,
        )
    )
    workers = _resolve_workers(args.workers, config)
    scored = _scored_patches(Path(args.models), Path(args.patches), args.mode, workers)
    result = calibration.calibrate_threshold(scored, target=target)
    wsi_store.write_json(_output_file(args.out), result.to_dict())
    print(
        f"calibrated t_s={result.t_s:.6f} (auc {result.auc:.4f}, "
        f"tpr {result.achieved_tpr:.4f}, fpr {result.achieved_fpr:.4f}) -> {args.out}"
    )
    return EXIT_OK


def cmd_infer(args, config):
    tau = float(_resolve(args.tau, config, "tau", postprocess.DEFAULT_TAU))
    fill = _resolve(args.fill, config, "fill", "zero")
    close_kernel = int(
        _resolve(args.close_kernel, config, "close_kernel", postprocess.DEFAULT_CLOSE_KERNEL)
    )
    min_fg = float(
        _resolve(args.min_fg, config, "min_fg_fraction", tiler.DEFAULT_MIN_FG_FRACTION)
    )
    workers = _resolve_workers(args.workers, config)
    if args.models is None and not args.oracle:
        raise ValueError("infer: --models is required unless --oracle is given")

    if args.t_s is not None:
        t_s = float(args.t_s)
    elif args.calib is not None:
        t_s = calibration.CalibrationResult.from_dict(
            wsi_store.read_json(args.calib)
        ).t_s
    else:
        t_s = 0.5

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    slide = wsi_store.load_slide(args.slide)
    width, height = slide.manifest.width_px, slide.manifest.height_px

    fg = tiler.extract_foreground(slide.image)
    plan = tiler.plan_grid(fg.mask, None, min_fg_fraction=min_fg)
    patches = tiler.extract_patches(slide.image, plan, slide_id=slide.manifest.slide_id)
    if not patches:
        raise ValueError(f"infer: no foreground patches in slide {args.slide}")

    cells = [(c.x, c.y) for c in plan.selected]
    start = time.perf_counter()
    if args.mode == "moe":
        if args.oracle:
            lookup = _oracle_lookup(Path(args.slide), cells)
            expert_models = [
                experts_mod.oracle_expert(lookup, k) for k in wsi_store.ARTIFACT_CLASSES
            ]
        else:
            expert_models = _load_expert_set(Path(args.models))
        decisions = moe.classify_patches_moe(
            patches, moe.MoEConfig(experts=expert_models, t_s=t_s), workers=workers
        )
    else:
        if args.oracle:
            lookup = _oracle_lookup(Path(args.slide), cells)
            model = experts_mod.oracle_multiclass(lookup)
        else:
            model = _load_named_model(Path(args.models), MULTICLASS_NAME)
        decisions = moe.classify_patches_multiclass(
            patches, model, t_s, workers=workers
        )
    elapsed = time.perf_counter() - start

    moe.write_decisions(decisions, out / "decisions.jsonl")
    matrix = postprocess.fill_matrix(decisions, width, height)
    throughput = len(patches) / max(elapsed, 1e-9) if args.timing else None
    report = postprocess.artifact_report(matrix, tau=tau, throughput_pps=throughput)
    wsi_store.write_json(out / "report.json", report.to_dict())
    wsi_store.save_raster(out / "seg_map.png", postprocess.render_segmentation(matrix))

    mask = postprocess.binarize_mask(matrix)
    closed = postprocess.morph_close(mask, kernel=close_kernel)
    pixel_mask = postprocess.resize_nearest(closed, (height, width))
    wsi_store.save_raster(
        out / "roi_mask.png", (pixel_mask.astype(np.uint8) * 255)
    )
    wsi_store.save_raster(
        out / "masked_slide.png", postprocess.apply_mask(slide.image, pixel_mask, fill)
    )
    print(
        f"inferred {slide.manifest.slide_id}: {report.verdict} "
        f"(rho {report.rho:.4f}, tau {report.tau}, {report.n_total} cells) -> {out}"
    )
    return EXIT_OK


def cmd_eval(args, config):
    decisions = moe.read_decisions(Path(args.results) / "decisions.jsonl")
    if not decisions:
        raise ValueError(f"eval: no decisions in {args.results}")
    truth = synthgen.load_truth(args.truth)
    cells = [(d.x, d.y) for d in decisions]
    truth_labels = tiler.dominant_cell_labels(truth, cells)

    pred = []
    true = []
    excluded = 0
    for decision, label in zip(decisions, truth_labels):
        if label is None:
            excluded += 1
            continue
        pred.append(decision.label)
        true.append(label)
    if not pred:
        raise ValueError("eval: no cells with labeled truth")

    pred = np.array(pred)
    true = np.array(true)
    counts = metrics.confusion_from_labels(pred, true, positive_label=0)
    summary = metrics.classification_metrics(counts)
    result = {
        "n_cells": int(len(pred)),
        "n_excluded": int(excluded),
        "tp": counts.tp,
        "fp": counts.fp,
        "tn": counts.tn,
        "fn": counts.fn,
        "dice": metrics.dice(pred == 0, true == 0),
        "kappa": metrics.cohen_kappa(pred, true),
    }
    result.update(summary)
    wsi_store.write_json(_output_file(args.out), result)
    shown = ", ".join(
        f"{k} {result[k]:.4f}" for k in ("dice", "accuracy", "sensitivity") if k in result
    )
    print(f"evaluated {len(pred)} cells: {shown} -> {args.out}")
    return EXIT_OK


def cmd_bench(args, config):
    repeats = int(_resolve(args.repeats, config, "repeats", 5))
    models_dir = Path(args.models)
    if not models_dir.is_dir():
        raise FileNotFoundError(f"missing models directory: {models_dir}")

    named = []
    for path in sorted(models_dir.iterdir()):
        if path.is_file() and path.suffix == ".json":
            named.append((path.stem, experts_mod.load_model(path)))
        elif path.is_dir() and (path / "model_manifest.json").is_file():
            named.append((path.name, experts_mod.load_external(path)))
    if not named:
        raise ValueError(f"bench: no models found in {models_dir}")

    paths = sorted(Path(args.patches).rglob("*.png"))[: args.limit]
    if not paths:
        raise ValueError(f"bench: no patches under {args.patches}")
    patches = [wsi_store.load_raster(p) for p in paths]

    print("model\tparam_count\tflop_count\tthroughput_pps")
    for name, model in named:
        profile = metrics.throughput_bench(model, patches, repeats=repeats, name=name)
        print(
            f"{profile.name}\t{profile.param_count}\t{profile.flop_count}\t"
            f"{profile.throughput_pps:.2f}"
        )
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="slideqc",
        description="Patch-based slide quality control pipeline.",
    )
    parser.add_argument("--config", help="JSON config file with default option values")
    parser.add_argument(
        "--verbose", action="store_true", help="log progress details to stderr"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic slide or corpus")
    p.add_argument("--spec", required=True, help="synthesis spec (JSON)")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("tile", help="tile a slide into patches")
    p.add_argument("--slide", required=True, help="slide directory")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--min-fg", type=float, help="minimum foreground fraction per cell")
    p.add_argument("--min-overlap", type=float, help="minimum class coverage per cell")
    p.add_argument("--workers", type=int, help="parallel workers")
    p.set_defaults(func=cmd_tile)

    p = sub.add_parser("train", help="train one expert or the multiclass model")
    p.add_argument("--patches", required=True, help="patch dataset root")
    p.add_argument(
        "--task",
        required=True,
        choices=list(moe.EXPERT_ORDER) + [MULTICLASS_NAME],
        help="binary artifact task or 'multiclass'",
    )
    p.add_argument("--out", required=True, help="output model file (JSON)")
    p.add_argument("--seed", type=int, help="training seed")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("calibrate", help="pick the operating threshold t_s")
    p.add_argument("--models", required=True, help="models directory")
    p.add_argument("--patches", required=True, help="labeled validation patches")
    p.add_argument("--out", required=True, help="output calibration file (JSON)")
    p.add_argument("--target-sens", type=float, help="target sensitivity")
    p.add_argument("--mode", choices=["moe", "multiclass"], default="moe")
    p.add_argument("--workers", type=int, help="parallel workers")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("infer", help="run QC on one slide")
    p.add_argument("--slide", required=True, help="slide directory")
    p.add_argument("--models", help="models directory")
    p.add_argument("--out", required=True, help="results directory")
    p.add_argument("--calib", help="calibration file from 'calibrate'")
    p.add_argument("--t-s", type=float, dest="t_s", help="operating threshold override")
    p.add_argument("--mode", choices=["moe", "multiclass"], default="moe")
    p.add_argument("--tau", type=float, help="accept verdict threshold on rho")
    p.add_argument("--fill", choices=["zero", "white"], help="masked-out fill")
    p.add_argument("--close-kernel", type=int, help="closing kernel size (odd)")
    p.add_argument("--min-fg", type=float, help="minimum foreground fraction per cell")
    p.add_argument("--workers", type=int, help="parallel workers")
    p.add_argument(
        "--oracle",
        action="store_true",
        help="classify from the slide's truth raster instead of models",
    )
    p.add_argument(
        "--timing",
        action="store_true",
        help="record measured throughput in report.json (breaks byte reproducibility)",
    )
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="score inference results against truth")
    p.add_argument("--results", required=True, help="directory written by 'infer'")
    p.add_argument("--truth", required=True, help="slide directory holding truth.png")
    p.add_argument("--out", required=True, help="output metrics file (JSON)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="benchmark model throughput and complexity")
    p.add_argument("--models", required=True, help="models directory")
    p.add_argument("--patches", required=True, help="patch directory (recursive)")
    p.add_argument("--repeats", type=int, help="timed passes per model")
    p.add_argument("--limit", type=int, default=32, help="max patches to load")
    p.set_defaults(func=cmd_bench)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="[%(name)s] %(message)s",
        stream=sys.stderr,
    )
    try:
        config = _load_config(args.config)
        return args.func(args, config)
    except (ValueError, FileNotFoundError, NotADirectoryError, KeyError,
            json.JSONDecodeError) as exc:
        print(f"slideqc {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001
        print(f"slideqc {args.command}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
