#!/usr/bin/env python3
"""Overfit the full model on a few phantoms and print the resulting scores."""

import argparse
import json

from edgegate.harness import run_overfit


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--workdir", default="runs/overfit")
    ap.add_argument("--epochs", type=int, default=200)
    ap.add_argument("--seed", type=int, default=7)
    ap.add_argument("--alpha0", type=float, default=1e-3)
    ap.add_argument("--batch-size", type=int, default=2)
    ap.add_argument("--count", type=int, default=4)
    ap.add_argument("--extent", type=int, default=32)
    args = ap.parse_args()
    result = run_overfit(
        args.workdir,
        epochs=args.epochs,
        seed=args.seed,
        alpha0=args.alpha0,
        batch_size=args.batch_size,
        count=args.count,
        extent=args.extent,
    )
    print(json.dumps(result, indent=2))


if __name__ == "__main__":
    main()
