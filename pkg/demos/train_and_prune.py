#!/usr/bin/env python3
"""Train a small gated network and prune it continuously while it learns.

Uses the synthetic blob task so the whole demo runs in about a minute; swap
in `load_mnist_dataset` (and the default MLP config) for the real thing.
Run: python demos/train_and_prune.py
"""

import numpy as np

from bmrs.criteria import CriterionConfig
from bmrs.data import split, synth_blobs
from bmrs.network import build_mlp, save_checkpoint
from bmrs.runner import TrainSchedule, continuous_prune

rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(0)))

full = synth_blobs(n=3000, n_classes=4, dim=16, separation=6.0, seed=0)
trainval, test = split(full, train_fraction=0.8, seed=1)
train, val = split(trainval, train_fraction=0.8, seed=2)
print(f"synthetic task: {train.n} train / {val.n} val / {test.n} test, "
      f"{full.n_classes} classes\n")

# deliberately oversized: 2 hidden layers of 32 for a 4-blob problem
net = build_mlp(rng, in_shape=(1, 1, 16), n_hidden_layers=2, hidden_dim=32,
                n_classes=4)
print(f"network starts with {net.count_parameters()} weight/bias scalars and "
      f"{net.n_structures()} prunable structures")

schedule = TrainSchedule(
    epochs_train=20,
    fine_tune_epochs=5,
    prune_interval=1,
    seed=3,
    batch_size=64,
    lr=2e-3,
    kl_scale=64.0,          # sparsity pressure; the synthetic set is small
)

net, records = continuous_prune(net, train, test, CriterionConfig("bmrs_n"),
                                schedule)
print("\nepoch  phase      accuracy  compression  alive")
for r in records:
    marker = f"  pruned {len(r.events)}" if r.events else ""
    print(f"{r.epoch:5d}  {r.phase:9s}  {r.test_accuracy:7.2f}%  "
          f"{r.compression:10.2f}%  {r.n_alive}{marker}")

save_checkpoint(net, "demo_model.bmrs")
print("\nfinal model written to demo_model.bmrs "
      f"({net.count_parameters()} scalars remain)")
