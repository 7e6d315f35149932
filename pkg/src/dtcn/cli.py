"""Command line entry point.

Exit codes: 0 success, 1 a check or metric failed, 2 usage/config/data error.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import gradcheck
from .config import RunConfig, parse_assignments
from .data import SPLITS, gen_synthetic, preprocess
from .errors import CheckpointError, ConfigError, DataError, NumericError
from .training import ablate_fusion, evaluate, train

EXIT_OK, EXIT_CHECK, EXIT_USAGE = 0, 1, 2
CLASS_NAMES = ("Positive", "Neutral", "Negative")
CLASS_INDEX = (2, 1, 0)  # label ids in the column order above

log = logging.getLogger("dtcn")


def _load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if args.set:
        cfg = cfg.with_overrides(parse_assignments("\n".join(args.set)))
    return cfg


def _need_dir(path: str, what: str) -> Path:
    p = Path(path)
    if not p.is_dir():
        raise DataError(f"{what} directory {path} does not exist")
    return p


def class_table(class_counts: dict[str, list[int]]) -> str:
    rows = [("Split",) + CLASS_NAMES + ("Total",)]
    totals = [0, 0, 0]
    for split in SPLITS:
        counts = [class_counts[split][i] for i in CLASS_INDEX]
        totals = [a + b for a, b in zip(totals, counts)]
        rows.append((split.capitalize(), *map(str, counts), str(sum(counts))))
    rows.append(("Total", *map(str, totals), str(sum(totals))))
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    return "\n".join("  ".join(c.rjust(w) if j else c.ljust(w) for j, (c, w) in enumerate(zip(r, widths))) for r in rows)


def cmd_gen_synthetic(args) -> int:
    manifest = gen_synthetic(
        args.out, args.mode, args.n, args.classes, args.seed, (args.height, args.width), args.pixel_noise, args.token_noise
    )
    print(f"wrote {args.n} samples to {args.out} (train {len(manifest.train)}, val {len(manifest.val)}, test {len(manifest.test)})")
    return EXIT_OK


def cmd_preprocess(args) -> int:
    report = preprocess(args.raw, args.out, args.seed)
    print(f"kept {report.kept}, discarded {report.discarded}")
    print(class_table(report.manifest.class_counts))
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load_config(args)
    result = train(cfg, _need_dir(args.data, "data"), args.out)
    test = result.record("test")
    print(f"best epoch {result.best_epoch}: val macro-F1 {result.best_val_f1:.4f}")
    print(f"test accuracy {test.accuracy:.4f}, {cfg.f1_average}-F1 {test.macro_f1:.4f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    rec = evaluate(args.checkpoint, _need_dir(args.data, "data"), args.split)
    print(",".join(("split", "loss_total", "loss_cls", "loss_contrast", "accuracy", "macro_f1")))
    print(",".join([rec.split] + rec.row()[2:]))
    return EXIT_OK


def cmd_ablate_fusion(args) -> int:
    cfg = _load_config(args)
    rows = ablate_fusion(cfg, _need_dir(args.data, "data"), args.out)
    print("mode,acc,f1")
    for row in rows:
        print(f"{row['mode']},{row['acc']:.4f},{row['f1']:.4f}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    cfg = _load_config(args)
    results, elapsed = gradcheck.run_all(cfg, args.seed)
    print(gradcheck.format_table(results))
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} passed in {elapsed:.1f}s")
    return EXIT_CHECK if failed else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dtcn", description="Dual-branch transformer with contrastive fusion.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synthetic", help="write a synthetic image-text dataset")
    p.add_argument("--mode", choices=("correlated", "xor"), required=True)
    p.add_argument("--n", type=int, default=2000)
    p.add_argument("--classes", type=int, default=3)
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--out", required=True)
    p.add_argument("--height", type=int, default=16)
    p.add_argument("--width", type=int, default=16)
    p.add_argument("--pixel-noise", type=float, default=0.1)
    p.add_argument("--token-noise", type=float, default=0.1)
    p.set_defaults(func=cmd_gen_synthetic)

    p = sub.add_parser("preprocess", help="curate an MVSA-style TSV into a dataset")
    p.add_argument("--raw", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=42)
    p.set_defaults(func=cmd_preprocess)

    def config_flags(p):
        p.add_argument("--config", help="key = value config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key (repeatable)")

    p = sub.add_parser("train", help="train one model")
    config_flags(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on one split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=SPLITS, default="val")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate-fusion", help="train early and late fusion on the same data")
    config_flags(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ablate_fusion)

    p = sub.add_parser("gradcheck", help="finite-difference check of every op and the full model")
    config_flags(p)
    p.add_argument("--seed", type=int, default=0, help="seed for the op-level checks")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, DataError, CheckpointError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_CHECK


if __name__ == "__main__":
    sys.exit(main())
