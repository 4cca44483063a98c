#!/usr/bin/env python3
"""Train with and without the edge stream across seeds and print val scores."""

import argparse
import json

from edgegate.harness import run_ablation


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--workdir", default="runs/ablation")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--epochs", type=int, default=30)
    ap.add_argument("--train-count", type=int, default=24)
    ap.add_argument("--val-count", type=int, default=6)
    ap.add_argument("--extent", type=int, default=32)
    ap.add_argument("--alpha0", type=float, default=1e-3)
    ap.add_argument("--batch-size", type=int, default=2)
    args = ap.parse_args()
    result = run_ablation(
        args.workdir,
        seeds=tuple(args.seeds),
        epochs=args.epochs,
        train_count=args.train_count,
        val_count=args.val_count,
        extent=args.extent,
        alpha0=args.alpha0,
        batch_size=args.batch_size,
    )
    print(json.dumps(result, indent=2))


if __name__ == "__main__":
    main()
