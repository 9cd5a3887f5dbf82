#!/usr/bin/env python3
"""Trace accuracy-vs-compression curves for a trained network.

Trains a gated network to convergence, then progressively removes
structures in each criterion's preferred order (fine-tuning one epoch per
chunk) and prints the resulting curves plus the rank agreement between
criteria.  Run: python demos/post_training_curve.py
"""

import copy

import numpy as np

from bmrs.criteria import CriterionConfig
from bmrs.data import split, synth_blobs
from bmrs.network import build_mlp
from bmrs.runner import (
    TrainSchedule,
    continuous_prune,
    criterion_rank_matrix,
    post_training_prune,
)

rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(1)))

full = synth_blobs(n=3000, n_classes=4, dim=16, separation=5.0, seed=10)
trainval, test = split(full, train_fraction=0.8, seed=11)
train, _ = split(trainval, train_fraction=0.8, seed=12)

net = build_mlp(rng, in_shape=(1, 1, 16), n_hidden_layers=2, hidden_dim=24,
                n_classes=4)
schedule = TrainSchedule(epochs_train=15, fine_tune_epochs=0, seed=13,
                         batch_size=64, lr=2e-3, kl_scale=64.0)
net, _ = continuous_prune(net, train, test, None, schedule)  # train, no pruning

criteria = {
    "bmrs_n": CriterionConfig("bmrs_n"),
    "bmrs_u-8": CriterionConfig("bmrs_u", p1=8, p2=23),
    "snr": CriterionConfig("snr"),
    "l2": CriterionConfig("l2"),
}

names, matrix = criterion_rank_matrix(net, criteria)
print("rank agreement between pruning orders (Spearman):")
print("            " + "  ".join(f"{n:>8s}" for n in names))
for i, name in enumerate(names):
    cells = "  ".join(f"{matrix[i, j]:8.3f}" for j in range(len(names)))
    print(f"  {name:>9s} {cells}")

fine_tune = TrainSchedule(epochs_train=1, fine_tune_epochs=0, seed=14,
                          batch_size=64, lr=1e-3)
for name, cfg in criteria.items():
    points = post_training_prune(copy.deepcopy(net), train, test, cfg,
                                 fine_tune, chunk_fraction=0.15)
    print(f"\n{name}: compression -> accuracy "
          f"(* marks points past the criterion's own stop)")
    for pt in points:
        star = " *" if pt.past_stop else ""
        print(f"   {pt.compression:6.2f}% -> {pt.accuracy:6.2f}%{star}")
