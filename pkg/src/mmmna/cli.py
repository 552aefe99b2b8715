"""Command-line entry point: ``mmmna <subcommand> ...``.

Exit codes: 0 success, 1 contract/config/usage error, 2 I/O or parse error.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

from .data import (PhantomSpec, generate_phantoms, read_dataset, split_folds, stack_subjects,
                   write_dataset)
from .errors import ConfigError, ContractError, DimensionError, NonFiniteError, ParseError
from .harness import (compare_predictions, emit_report, load_checkpoint, load_train_config, predict,
                      prediction_rows, read_predictions, run_cross_validation,
                      run_missing_modality_ablation, save_checkpoint, train, write_predictions)
from .model import build_model


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _shape(text):
    try:
        dims = tuple(int(v) for v in text.split(","))
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad shape {text!r}") from exc
    if len(dims) != 3:
        raise argparse.ArgumentTypeError("shape needs three comma-separated extents")
    return dims


def build_parser():
    p = _Parser(prog="mmmna", description="Multi-scale attention fusion survival classifier.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="write a synthetic phantom dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--subjects", type=int, required=True)
    g.add_argument("--shape", type=_shape, default=(16, 32, 32))
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--signal", type=float, default=0.9, help="class signal strength in [0, 1]")
    g.add_argument("--age-share", type=float, default=0.5, help="share of the signal carried by age")

    t = sub.add_parser("train", help="train one model with a held-out validation fold")
    t.add_argument("--data", required=True)
    t.add_argument("--config", required=True)
    t.add_argument("--out", required=True)

    c = sub.add_parser("cv", help="k-fold cross-validation")
    c.add_argument("--data", required=True)
    c.add_argument("--config", required=True)
    c.add_argument("--folds", type=int, default=10)
    c.add_argument("--out", required=True)
    c.add_argument("--workers", type=int, default=1)

    a = sub.add_parser("ablate", help="missing-modality evaluation of a trained model")
    a.add_argument("--data", required=True)
    a.add_argument("--model", required=True)
    a.add_argument("--out", required=True)

    m = sub.add_parser("compare", help="McNemar test between two prediction files")
    m.add_argument("--preds-a", required=True)
    m.add_argument("--preds-b", required=True)

    gc = sub.add_parser("gradcheck", help="run the finite-difference gradient suite")
    gc.add_argument("--only", default=None, help="restrict to checks whose name starts with this")
    return p


def _cmd_gen_data(args):
    spec = PhantomSpec(seed=args.seed, n_subjects=args.subjects, shape=args.shape, class_signal=args.signal,
                       age_share=args.age_share)
    subjects = generate_phantoms(spec)
    write_dataset(subjects, args.out)
    print(f"wrote {len(subjects)} subjects to {args.out}")


def _cmd_train(args):
    cfg = load_train_config(args.config)
    subjects = read_dataset(args.data)
    split = split_folds([s.id for s in subjects], min(10, len(subjects)), cfg.seed,
                        labels=[int(s.label) for s in subjects])
    val_ids = set(split.folds[0])
    train_set = [s for s in subjects if s.id not in val_ids]
    val_set = [s for s in subjects if s.id in val_ids]
    model = build_model(cfg.model_config(subjects[0].shape))
    result = train(model, train_set, val_set, cfg)
    out = Path(args.out)
    save_checkpoint(model, out / "model")
    with open(out / "history.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(result.history[0]))
        w.writeheader()
        w.writerows(result.history)
    x, ni, y = stack_subjects(val_set)
    write_predictions(out / "val_predictions.csv", prediction_rows([s.id for s in val_set], y, predict(model, x, ni)))
    print(f"best epoch {result.best_epoch}; checkpoint in {out / 'model'}")


def _cmd_cv(args):
    cfg = load_train_config(args.config)
    subjects = read_dataset(args.data)
    res = run_cross_validation(subjects, cfg, folds=args.folds, out_dir=args.out, workers=args.workers,
                               ablate=not cfg.baseline_concat)
    name = "baseline" if cfg.baseline_concat else ("single-scale" if cfg.single_scale else "mmmna")
    emit_report({name: res.report}, args.out)
    if res.ablation:
        emit_report(res.ablation, Path(args.out) / "ablation")
    print((Path(args.out) / "summary.txt").read_text(), end="")


def _cmd_ablate(args):
    model = load_checkpoint(args.model)
    rows = run_missing_modality_ablation(model, read_dataset(args.data))
    emit_report(rows, args.out)
    print((Path(args.out) / "summary.txt").read_text(), end="")


def _cmd_compare(args):
    table, res = compare_predictions(read_predictions(args.preds_a), read_predictions(args.preds_b))
    print(f"b={table.b} c={table.c} chi2={res.statistic:.6f} p={res.p_value:.6f}"
          + (" (degenerate: no discordant pairs)" if res.degenerate else ""))


def _cmd_gradcheck(args):
    from .gradcheck import run_gradient_suite

    results = run_gradient_suite(only=args.only)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name:34s} {r.error:.3e}  ({r.seconds:.2f}s)")
    if not results or not all(r.passed for r in results):
        return 1
    return 0


COMMANDS = {
    "gen-data": _cmd_gen_data,
    "train": _cmd_train,
    "cv": _cmd_cv,
    "ablate": _cmd_ablate,
    "compare": _cmd_compare,
    "gradcheck": _cmd_gradcheck,
}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"mmmna: error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING)
    try:
        return COMMANDS[args.command](args) or 0
    except (ParseError, OSError) as exc:
        print(f"mmmna: {exc}", file=sys.stderr)
        return 2
    except (ConfigError, ContractError, DimensionError, NonFiniteError) as exc:
        print(f"mmmna: {exc}", file=sys.stderr)
        return 1


cli = main


if __name__ == "__main__":
    sys.exit(main())
