"""Sweep the number of text refinement layers on correlated synthetic data.

    python scripts/lt_sweep.py --out runs/lt --depths 0 1 2
"""
import argparse
import csv
import logging
from pathlib import Path

from dtcn.config import RunConfig
from dtcn.data import gen_synthetic
from dtcn.training import train


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="runs/lt")
    ap.add_argument("--n", type=int, default=2000)
    ap.add_argument("--seed", type=int, default=42)
    ap.add_argument("--depths", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--token-noise", type=float, default=0.1)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    out = Path(args.out)
    data = out / "data"
    gen_synthetic(data, "correlated", args.n, 3, args.seed, token_noise=args.token_noise)
    with open(out / "summary.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(("extra_text_layers", "best_epoch", "best_val_f1", "test_acc", "test_f1"))
        for depth in args.depths:
            result = train(RunConfig(seed=args.seed, extra_text_layers=depth), data, out / f"lt{depth}")
            test = result.record("test")
            writer.writerow((depth, result.best_epoch, f"{result.best_val_f1:.6f}", f"{test.accuracy:.6f}", f"{test.macro_f1:.6f}"))
            print(f"L_t={depth}: best val F1 {result.best_val_f1:.4f} (epoch {result.best_epoch}), test F1 {test.macro_f1:.4f}")


if __name__ == "__main__":
    main()
