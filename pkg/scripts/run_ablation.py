#!/usr/bin/env python3
"""Band-subset ablation over multiple seeds.

Trains one model per band subset (RGB, RGB-NIR, RGB-NIR-SWIR,
RGB-NIR-SWIR-NDSW) on shared synthetic scenes and chip windows, repeats
for each seed, and reports per-seed tables plus the across-seed mean.

Usage:
    python3 scripts/run_ablation.py --out runs/ablation --seeds 0 1 2
"""

import argparse
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

import numpy as np

from dumpwatch import dataset as ds
from dumpwatch import training


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--out", default="runs/ablation", help="output directory")
    parser.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    parser.add_argument("--scenes", type=int, default=2)
    parser.add_argument("--scene-size", type=int, default=160)
    parser.add_argument("--epochs", type=int, default=16)
    args = parser.parse_args()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    scenes = []
    for i in range(args.scenes):
        cfg = ds.SynthConfig(
            scene_size=args.scene_size,
            dump_count=4,
            background_texture_seed=300 + i,
        )
        scenes.append(ds.generate_synthetic(cfg))
    print(f"generated {len(scenes)} scenes", file=sys.stderr)

    hyper = training.Hyperparams(
        batch_size=16,
        max_epochs=args.epochs,
        learning_rate=2e-3,
        pos_weight=5.0,
        plateau_patience=args.epochs,
    )
    by_label: dict[str, list[tuple[float, float]]] = {}
    for seed in args.seeds:
        rows = training.ablate(scenes, hyper=hyper, seed=seed)
        training.save_ablation(rows, out / f"ablation_seed{seed}")
        print(f"--- seed {seed}", file=sys.stderr)
        print(training.format_ablation_table(rows), file=sys.stderr)
        for row in rows:
            by_label.setdefault(row.label, []).append((row.loss, row.mean_iou))

    mean_rows = [
        training.AblationRow(
            label=label,
            loss=float(np.mean([loss for loss, _ in vals])),
            mean_iou=float(np.mean([iou for _, iou in vals])),
        )
        for label, vals in by_label.items()
    ]
    print(f"--- mean over seeds {args.seeds}", file=sys.stderr)
    print(training.format_ablation_table(mean_rows), file=sys.stderr)
    training.save_ablation(mean_rows, out / "ablation_mean")
    return 0


if __name__ == "__main__":
    sys.exit(main())
