#!/usr/bin/env python3
"""Run the whole pipeline on synthetic data in one go.

Generates scenes, builds a chip catalog, trains a model, evaluates it,
predicts over the first scene, and vectorizes the probabilities. All
artifacts land under --out; every stage goes through the real CLI, so
this doubles as a smoke test of the command-line surface.

Usage:
    python3 scripts/run_demo.py --out runs/demo --seed 7
"""

import argparse
import json
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from dumpwatch import cli


def build_config(out: Path, args: argparse.Namespace) -> Path:
    config = {
        "seed": args.seed,
        "paths": {
            "scene_dir": str(out / "scenes"),
            "catalog": str(out / "catalog"),
            "checkpoint": str(out / "model"),
            "probability": str(out / "probability"),
            "detections": str(out / "detections.geojson"),
            "report": str(out / "report.json"),
            "ablation": str(out / "ablation"),
        },
        "synth": {
            "scene_count": args.scenes,
            "scene_size": args.scene_size,
            "dump_count": 5,
        },
        "chip": {"chip_size": 64, "stride": 32, "test_frac": 0.15, "val_frac": 0.2},
        "model": {"depth": args.depth, "base_filters": args.base_filters},
        "train": {
            "batch_size": 16,
            "max_epochs": args.epochs,
            "learning_rate": 2e-3,
            "pos_weight": 5.0,
            "plateau_patience": args.epochs,
        },
        "inference": {"tile_size": 128, "overlap": 32},
        "postprocess": {"probability_threshold": 0.5, "min_area": 300.0},
    }
    path = out / "run.json"
    out.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(config, indent=2) + "\n")
    return path


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--out", default="runs/demo", help="output directory")
    parser.add_argument("--seed", type=int, default=7)
    parser.add_argument("--scenes", type=int, default=4)
    parser.add_argument("--scene-size", type=int, default=192)
    parser.add_argument("--depth", type=int, default=2)
    parser.add_argument("--base-filters", type=int, default=8)
    parser.add_argument("--epochs", type=int, default=36)
    args = parser.parse_args()

    out = Path(args.out)
    config = build_config(out, args)
    print(f"config written to {config}", file=sys.stderr)

    stages = ("synth", "chip", "train", "evaluate", "predict", "postprocess")
    for stage in stages:
        print(f"--- {stage}", file=sys.stderr)
        code = cli.main([stage, "--config", str(config)])
        if code != 0:
            print(f"stage {stage} failed with exit code {code}", file=sys.stderr)
            return code
    print(f"done; artifacts under {out}", file=sys.stderr)
    return 0


if __name__ == "__main__":
    sys.exit(main())
