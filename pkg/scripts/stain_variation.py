#!/usr/bin/env python3
"""Compare hue and saturation statistics across two stain tints.

Renders one slide per tint, tiles both, and summarizes per-patch mean
hue and saturation. A large gap between the cohort summaries (in
combined standard deviations) is what out-of-distribution staining
looks like to the feature extractor.
"""
import argparse
import math
from pathlib import Path

from slideqc import synthgen, tiler
from slideqc.metrics import hs_stats, write_hs_csv
from slideqc.tiler import extract_foreground, extract_patches, plan_grid


def cohort(out_dir, seed, hue, sat, val):
    # artifact-free slides: the cohorts compare stain tints, so nothing
    # but tissue and background should enter the statistics
    spec = synthgen.SynthSpec(
        seed=seed, width=1568, height=1568,
        tint_hue=hue, tint_sat=sat, tint_val=val,
    )
    slide = synthgen.generate_slide(spec, out_dir)
    fg = extract_foreground(slide.image)
    plan = plan_grid(fg.mask, min_fg_fraction=0.98)
    return extract_patches(slide.image, plan, slide_id=out_dir.name)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, required=True)
    ap.add_argument("--seed", type=int, default=7)
    ap.add_argument("--hue-b", type=float, default=260.0,
                    help="tint hue of the shifted cohort (degrees)")
    ap.add_argument("--sat-b", type=float, default=0.22)
    ap.add_argument("--plot", action="store_true",
                    help="write a hue-saturation scatter (needs matplotlib)")
    args = ap.parse_args()
    args.out.mkdir(parents=True, exist_ok=True)

    cohorts = {
        "reference": cohort(args.out / "slide_a", args.seed, 325.0, 0.38, 0.72),
        "shifted": cohort(args.out / "slide_b", args.seed + 1,
                          args.hue_b, args.sat_b, 0.72),
    }
    summaries = {}
    for name, patches in cohorts.items():
        rows, summary = hs_stats(patches)
        write_hs_csv(rows, args.out / f"hs_{name}.csv")
        summaries[name] = (rows, summary)
        print(f"{name:9s} n={summary['n_patches']:3d}  "
              f"hue {summary['hue_mean']:6.1f} +/- {summary['hue_std']:.1f}  "
              f"sat {summary['sat_mean']:.3f} +/- {summary['sat_std']:.3f}")

    a, b = summaries["reference"][1], summaries["shifted"][1]
    for axis in ("hue", "sat"):
        gap = abs(a[f"{axis}_mean"] - b[f"{axis}_mean"])
        combined = math.hypot(a[f"{axis}_std"], b[f"{axis}_std"])
        ratio = gap / combined if combined > 0 else float("inf")
        print(f"{axis} separation: {gap:.3f} ({ratio:.1f} combined stds)")

    if args.plot:
        try:
            import matplotlib
            matplotlib.use("Agg")
            import matplotlib.pyplot as plt
        except ImportError:
            print("matplotlib not installed, skipping plot")
            return
        fig, ax = plt.subplots(figsize=(6, 5))
        for name, (rows, _) in summaries.items():
            ax.scatter([r[1] for r in rows], [r[2] for r in rows],
                       s=12, alpha=0.6, label=name)
        ax.set_xlabel("mean hue (degrees)")
        ax.set_ylabel("mean saturation")
        ax.legend()
        fig.tight_layout()
        fig.savefig(args.out / "hs_plot.png", dpi=120)
        print(f"plot written to {args.out / 'hs_plot.png'}")


if __name__ == "__main__":
    main()
