#!/usr/bin/env python3
"""Accuracy-versus-inference-cost frontier across model sizes.

Trains one model per (layers, hidden) point on the same synthetic
arithmetic corpus, scores each on a shared held-out split, and writes a
cost-sorted tradeoff CSV (label, GFLOPs/token, accuracy) plus a console
table. Larger points dominate the runtime; the default grid finishes in
well under a minute.
"""

import argparse
import sys
from pathlib import Path

from clozerm.data import synth_generate
from clozerm.evaluation import (
    EvalModel,
    TradeoffPoint,
    emit_tradeoff,
    eval_dataset,
    format_gflops,
)
from clozerm.training import ModelSettings, TrainConfig, train

GRID = ((0, 16, 2), (1, 32, 4), (2, 64, 8))  # (layers, hidden, heads)


def parse_args(argv):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--out", default="results/tradeoff.csv", help="tradeoff CSV path")
    parser.add_argument("--n-train", type=int, default=2000, help="training pairs")
    parser.add_argument("--n-heldout", type=int, default=300, help="held-out pairs")
    parser.add_argument("--seed", type=int, default=0, help="shared run seed")
    parser.add_argument("--learning-rate", type=float, default=1.75e-3)
    return parser.parse_args(argv)


def main(argv=None):
    args = parse_args(argv)
    train_pairs = synth_generate("arithmetic", args.n_train, seed=args.seed)
    heldout = synth_generate("arithmetic", args.n_heldout, seed=args.seed + 10000)

    points = []
    for layers, hidden, heads in GRID:
        settings = ModelSettings(n_layers=layers, hidden=hidden, n_heads=heads,
                                 ffn_mult=4, max_seq=64)
        config = TrainConfig(learning_rate=args.learning_rate, batch_size=1,
                             seed=args.seed, model=settings, prefix="Solve:")
        result = train(config, train_pairs)
        report = eval_dataset(EvalModel.from_checkpoint(result.checkpoint), heldout)
        label = f"L{layers}-h{hidden}"
        points.append(TradeoffPoint(label=label,
                                    gflops_per_token=report.gflops_per_token,
                                    accuracy=report.total_accuracy))
        print(f"{label:<10} accuracy {report.total_accuracy:.3f}  "
              f"cost {format_gflops(report.gflops_per_token * 1e9)} GFLOPs/token")

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    emit_tradeoff(points, out)
    print(f"wrote {out} ({len(points)} points, cost ascending)")
    return 0


if __name__ == "__main__":
    sys.exit(main())
