#!/usr/bin/env python3
"""Missing-modality evaluation: cross-validate once, score all eight availability rows per fold."""

import argparse
from pathlib import Path

from mmmna.data import PhantomSpec, generate_phantoms, read_dataset
from mmmna.harness import TrainConfig, emit_report, run_cross_validation


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--data")
    ap.add_argument("--subjects", type=int, default=100)
    ap.add_argument("--shape", default="16,16,16")
    ap.add_argument("--signal", type=float, default=1.0)
    ap.add_argument("--age-share", type=float, default=0.1)
    ap.add_argument("--folds", type=int, default=10)
    ap.add_argument("--epochs", type=int, default=60)
    ap.add_argument("--lr", type=float, default=1e-2)
    ap.add_argument("--workers", type=int, default=1)
    ap.add_argument("--out", default="runs/ablation")
    args = ap.parse_args()

    if args.data:
        subjects = read_dataset(args.data)
    else:
        shape = tuple(int(v) for v in args.shape.split(","))
        subjects = generate_phantoms(PhantomSpec(seed=0, n_subjects=args.subjects, shape=shape,
                                                 class_signal=args.signal, age_share=args.age_share))
    cfg = TrainConfig(lr=args.lr, max_epochs=args.epochs, patience=15)
    res = run_cross_validation(subjects, cfg, folds=args.folds, workers=args.workers, ablate=True)
    emit_report(res.ablation, Path(args.out))
    print((Path(args.out) / "summary.txt").read_text(), end="")


if __name__ == "__main__":
    main()
