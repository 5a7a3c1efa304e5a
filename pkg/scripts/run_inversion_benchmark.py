#!/usr/bin/env python3
"""Inversion benchmarks for a trained checkpoint.

Produces the per-point grid-search table (optimal step size and iteration
count per test point, plus the timed batch inversion at the best overall
setting) and the iterations-vs-error curves comparing the Newton-like and
contraction iterations across Lipschitz bounds.

Example:
    python scripts/run_inversion_benchmark.py --checkpoint runs/arith/final.json \
        --dataset arith --n 100 --out results/inversion/
"""

import argparse
import os
import sys

from grflow.cli import main as cli_main


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--checkpoint", required=True)
    ap.add_argument("--dataset")
    ap.add_argument("--data")
    ap.add_argument("--n", type=int, default=100)
    ap.add_argument("--out", required=True)
    args = ap.parse_args()

    source = ["--dataset", args.dataset] if args.dataset else ["--data", args.data]
    if not (args.dataset or args.data):
        ap.error("need --dataset or --data")

    grid_dir = os.path.join(args.out, "grid")
    rc = cli_main(["bench-invert", "--checkpoint", args.checkpoint, *source,
                   "--n", str(args.n), "--out", grid_dir])
    if rc != 0:
        return rc
    sweep_dir = os.path.join(args.out, "newton_vs_banach")
    return cli_main(["bench-invert", "--checkpoint", args.checkpoint, *source,
                     "--n", str(args.n), "--method", "both",
                     "--c-sweep", "0.5,0.7,0.9,0.99", "--max-iters", "60",
                     "--out", sweep_dir])


if __name__ == "__main__":
    sys.exit(main())
