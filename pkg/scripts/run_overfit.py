#!/usr/bin/env python3
"""Fit the full multi-scale model to a handful of phantoms until it memorises them."""

import argparse
import time

import numpy as np

from mmmna.data import PhantomSpec, generate_phantoms, stack_subjects
from mmmna.harness import TrainConfig, predict, train
from mmmna.model import build_model


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--subjects", type=int, default=16)
    ap.add_argument("--shape", default="16,32,32")
    ap.add_argument("--epochs", type=int, default=200)
    ap.add_argument("--lr", type=float, default=1e-3)
    ap.add_argument("--target", type=float, default=0.95)
    ap.add_argument("--seed", type=int, default=1)
    args = ap.parse_args()

    shape = tuple(int(v) for v in args.shape.split(","))
    subjects = generate_phantoms(PhantomSpec(seed=args.seed, n_subjects=args.subjects, shape=shape))
    x, ni, y = stack_subjects(subjects)
    cfg = TrainConfig(lr=args.lr, max_epochs=args.epochs, patience=args.epochs - 1, augment=False)
    model = build_model(cfg.model_config(shape))
    t0 = time.perf_counter()

    def report(epoch, m, record):
        acc = float(np.mean(predict(m, x, ni)["fusion"].argmax(axis=1) == y))
        print(f"epoch {epoch:3d}  loss {record['train_loss']:.4f}  eval train acc {acc:.3f}"
              f"  {time.perf_counter() - t0:.0f}s", flush=True)
        return acc >= args.target

    train(model, (x, ni, y), None, cfg, on_epoch_end=report)


if __name__ == "__main__":
    main()
