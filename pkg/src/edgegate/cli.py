"""Command-line interface: gen, train, eval, predict, gradcheck."""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

from .gradcheck import run_suites
from .harness import make_dataset
from .train import TrainConfig, evaluate, predict, train


def _cmd_gen(args) -> int:
    manifest = make_dataset(
        args.out,
        count=args.count,
        extent=args.extent,
        num_classes=args.classes,
        seed=args.seed,
        train_fraction=args.train_fraction,
        all_train=args.all_train,
    )
    print(manifest)
    return 0


def _cmd_train(args) -> int:
    config = TrainConfig.from_file(args.config)
    overrides = {"out_dir": args.out}
    if args.no_edge_stream:
        overrides["model"] = dataclasses.replace(config.model, edge_stream=False)
    config = dataclasses.replace(config, **overrides)
    result = train(config, resume_from=args.resume)
    summary = {
        "checkpoint": result.final_checkpoint,
        "metrics": result.metrics_path,
        "epochs_run": result.epochs_run,
    }
    if result.train_metrics is not None:
        summary["train_dice_mean_foreground"] = result.train_metrics.dice_mean_foreground
    if result.val_metrics is not None:
        summary["val_dice_mean_foreground"] = result.val_metrics.dice_mean_foreground
    print(json.dumps(summary, sort_keys=True))
    return 0


def _cmd_eval(args) -> int:
    metrics_out = str(Path(args.checkpoint).parent / "eval_metrics.jsonl")
    record = evaluate(args.checkpoint, args.manifest, args.split, metrics_out=metrics_out)
    print(record.to_json())
    return 0


def _cmd_predict(args) -> int:
    written = predict(args.checkpoint, args.input, args.out)
    print(json.dumps(written, sort_keys=True))
    return 0


def _cmd_gradcheck(args) -> int:
    results = run_suites(args.module)
    failed = 0
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(f"{status} {r.module}:{r.name} rel_error={r.max_rel_error:.3e} threshold={r.threshold:.0e}")
        failed += 0 if r.passed else 1
    print(f"{len(results) - failed}/{len(results)} gradient checks passed")
    return 1 if failed else 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="edgegate",
        description="Edge-gated volumetric segmentation: data, training, evaluation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen", help="generate a phantom dataset with a manifest")
    gen.add_argument("--count", type=int, required=True)
    gen.add_argument("--extent", type=int, default=32)
    gen.add_argument("--classes", type=int, default=3)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--out", required=True)
    gen.add_argument("--train-fraction", type=float, default=0.8)
    gen.add_argument("--all-train", action="store_true", help="assign every record to train")
    gen.set_defaults(fn=_cmd_gen)

    tr = sub.add_parser("train", help="train from a JSON config file")
    tr.add_argument("--config", required=True)
    tr.add_argument("--out", required=True)
    tr.add_argument("--no-edge-stream", action="store_true", help="ablation: backbone only")
    tr.add_argument("--resume", default=None, help="checkpoint to continue from")
    tr.set_defaults(fn=_cmd_train)

    ev = sub.add_parser("eval", help="score a checkpoint on a manifest split")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--manifest", required=True)
    ev.add_argument("--split", choices=("train", "val"), required=True)
    ev.set_defaults(fn=_cmd_eval)

    pr = sub.add_parser("predict", help="write prediction volumes for one input")
    pr.add_argument("--checkpoint", required=True)
    pr.add_argument("--input", required=True)
    pr.add_argument("--out", required=True)
    pr.set_defaults(fn=_cmd_predict)

    gc = sub.add_parser("gradcheck", help="run the finite-difference suites")
    gc.add_argument("--module", default=None, help="restrict to one suite")
    gc.set_defaults(fn=_cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except Exception as exc:  # surface a clean one-line failure, nonzero exit
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
