"""Per-epoch loss and metric curves for one run, as a long-format CSV for
external plotting (epoch, split, metric, value).

    python scripts/convergence.py --out runs/curve
"""
import argparse
import csv
import logging
from pathlib import Path

from dtcn.config import RunConfig
from dtcn.data import gen_synthetic
from dtcn.training import read_metrics, train

METRICS = ("loss_total", "loss_cls", "loss_contrast", "accuracy", "macro_f1")


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="runs/curve")
    ap.add_argument("--mode", default="correlated", choices=["correlated", "xor"])
    ap.add_argument("--n", type=int, default=2000)
    ap.add_argument("--seed", type=int, default=42)
    ap.add_argument("--epochs", type=int, default=10)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    out = Path(args.out)
    k = 3 if args.mode == "correlated" else 2
    gen_synthetic(out / "data", args.mode, args.n, k, args.seed)
    result = train(RunConfig(num_classes=k, seed=args.seed, epochs=args.epochs), out / "data", out / "run")
    with open(out / "curve.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(("epoch", "split", "metric", "value"))
        for row in read_metrics(result.run_dir / "metrics.csv"):
            for m in METRICS:
                writer.writerow((row["epoch"], row["split"], m, row[m]))
    print(f"wrote {out / 'curve.csv'}")


if __name__ == "__main__":
    main()
