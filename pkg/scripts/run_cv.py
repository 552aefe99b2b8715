#!/usr/bin/env python3
"""Cross-validated comparison of the concat baseline, the single-scale and the multi-scale model.

Writes one report directory per method plus a combined ``summary.txt``, and
prints McNemar tests of the multi-scale model against the other two and
against a majority-class dummy (pooled over folds).
"""

import argparse
from pathlib import Path

import numpy as np

from mmmna.data import PhantomSpec, generate_phantoms, read_dataset
from mmmna.harness import TrainConfig, contingency_table, emit_report, mcnemar_test, run_cross_validation

METHODS = {
    "baseline": {"baseline_concat": True},
    "single-scale": {"single_scale": True},
    "mmmna": {},
}


def pooled(res):
    rows = sorted((r for fold in res.predictions for r in fold), key=lambda r: r["subject_id"])
    return np.array([r["label"] for r in rows]), np.array([r["pred_fusion"] for r in rows])


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--data", help="MMV1 dataset directory; phantoms are generated when omitted")
    ap.add_argument("--subjects", type=int, default=100)
    ap.add_argument("--shape", default="16,16,16")
    ap.add_argument("--signal", type=float, default=1.0)
    ap.add_argument("--age-share", type=float, default=0.1)
    ap.add_argument("--folds", type=int, default=10)
    ap.add_argument("--epochs", type=int, default=60)
    ap.add_argument("--patience", type=int, default=15)
    ap.add_argument("--lr", type=float, default=1e-2)
    ap.add_argument("--workers", type=int, default=1)
    ap.add_argument("--methods", default=",".join(METHODS))
    ap.add_argument("--out", default="runs/cv")
    args = ap.parse_args()

    if args.data:
        subjects = read_dataset(args.data)
    else:
        shape = tuple(int(v) for v in args.shape.split(","))
        subjects = generate_phantoms(PhantomSpec(seed=0, n_subjects=args.subjects, shape=shape,
                                                 class_signal=args.signal, age_share=args.age_share))
    out = Path(args.out)
    reports, preds = {}, {}
    for name in args.methods.split(","):
        cfg = TrainConfig(lr=args.lr, max_epochs=args.epochs, patience=args.patience, **METHODS[name])
        res = run_cross_validation(subjects, cfg, folds=args.folds, out_dir=out / name, workers=args.workers)
        emit_report({name: res.report}, out / name)
        reports[name], preds[name] = res.report, pooled(res)
        print(f"{name}: done", flush=True)
    emit_report(reports, out)
    print((out / "summary.txt").read_text(), end="")

    y, ours = preds.get("mmmna", next(iter(preds.values())))
    majority = np.full(len(y), np.bincount(y).argmax())
    others = {k: v[1] for k, v in preds.items() if k != "mmmna"}
    others["majority-dummy"] = majority
    for name, theirs in others.items():
        table = contingency_table(y, ours, theirs)
        test = mcnemar_test(table)
        print(f"mmmna vs {name}: b={table.b} c={table.c} chi2={test.statistic:.4f} p={test.p_value:.4g}")


if __name__ == "__main__":
    main()
