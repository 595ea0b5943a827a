"""Trainer command line: generate data, train, export, and report."""

from __future__ import annotations

import argparse
import sys
import time

from .evalexits import DEFAULT_TAUS, evaluate_exits, write_report_csv, CSV_HEADER
from .export import train_and_export
from .synth import generate_dataset
from .training import TrainingConfig


def cmd_train(args) -> int:
    t0 = time.perf_counter()
    print(f"generating {args.flows} synthetic flows (seed {args.data_seed})...")
    dataset = generate_dataset(n_flows=args.flows, seed=args.data_seed)
    print(f"dataset hash {dataset.content_hash()}, "
          f"pos_weight {dataset.class_ratio:.3f}, "
          f"{time.perf_counter() - t0:.1f}s")
    cfg = TrainingConfig(seed=args.seed, max_epochs=args.epochs,
                         batch_size=args.batch_size)
    trained, frozen = train_and_export(dataset, cfg, args.out, tau=args.tau)
    print(f"trained {len(trained.history)} epochs "
          f"(best val loss {min(h['val'] for h in trained.history):.4f}), "
          f"bundle written to {args.out}")
    _, test_idx = dataset.split()
    report = evaluate_exits(trained, frozen, dataset, test_idx, DEFAULT_TAUS)
    print(CSV_HEADER)
    for row in report.rows():
        print(row)
    if args.report:
        write_report_csv(report, args.report)
        print(f"report written to {args.report}")
    print(f"total {time.perf_counter() - t0:.1f}s")
    return 0


def main(argv=None) -> int:
    p = argparse.ArgumentParser(prog="flowguard-train",
                                description="QAT trainer for the split early-exit model")
    sub = p.add_subparsers(dest="command", required=True)
    tr = sub.add_parser("train", help="train on synthetic flows and export an EEP4 bundle")
    tr.add_argument("--flows", type=int, default=20_000)
    tr.add_argument("--epochs", type=int, default=40)
    tr.add_argument("--batch-size", type=int, default=256)
    tr.add_argument("--seed", type=int, default=0)
    tr.add_argument("--data-seed", type=int, default=7)
    tr.add_argument("--tau", type=float, default=0.9)
    tr.add_argument("--out", default="trained.eep4")
    tr.add_argument("--report", default=None)
    tr.set_defaults(fn=cmd_train)
    args = p.parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
