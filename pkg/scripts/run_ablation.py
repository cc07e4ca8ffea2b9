#!/usr/bin/env python3
"""Ablation table at desk scale: both components, each alone, and neither.

Every configuration is distilled with seeds 0..reps-1 against one shared
expert pool and evaluated on the ConvNet over five seeds.
"""

import argparse
import json
from pathlib import Path

import numpy as np

from trajdistill import desk


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--reps", type=int, default=3, help="distillation seeds per configuration")
    parser.add_argument("--variants", default="full,ho-only,e2c-only,neither",
                        help="comma-separated subset of " + ",".join(desk.ABLATIONS))
    parser.add_argument("--out", default="runs/ablation.json", help="results JSON path")
    args = parser.parse_args()

    train, test = desk.blobs()
    pool = desk.expert_pool(train)
    rows = {}
    for name in args.variants.split(","):
        accs = []
        for seed in range(args.reps):
            run = desk.run_variant(name, train, test, pool, seed)
            accs.append(run.report.mean)
            print(f"{name:<10} seed {seed}: {run.report.formatted()} ({run.seconds:.0f}s)", flush=True)
        rows[name] = accs

    print(f"\n{'config':<10}{'e2c':>5}{'ho':>5}  mean over reps")
    for name, accs in rows.items():
        flags = desk.ABLATIONS[name]
        e2c = "-" if flags.get("e2c_enabled") is False else "x"
        ho = "-" if flags.get("ho_enabled") is False else "x"
        print(f"{name:<10}{e2c:>5}{ho:>5}  {100 * np.mean(accs):.2f}±{100 * np.std(accs):.2f}")

    path = Path(args.out)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(rows, indent=2) + "\n")


if __name__ == "__main__":
    main()
