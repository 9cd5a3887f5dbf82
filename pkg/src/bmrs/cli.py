"""Experiment runner CLI.

Subcommands:

* ``train``      — continuous pruning (or plain training / the one-shot L2
                   baseline); writes run.csv, manifest.json, model.bmrs.
* ``prune-post`` — post-training rank-based pruning of a checkpoint; writes
                   curve.csv and the criterion rank-correlation matrix.
* ``sweep-p1``   — one continuous run per precision cutoff p1; writes sweep.csv.
* ``verify``     — oracle suites over the closed forms; writes report.json.

Configuration comes from an optional JSON file (``--config``) overridden by
flags; every run echoes its full configuration (plus a content hash) into
``manifest.json`` so a run can be reproduced from its manifest alone.

Exit codes: 0 success, 2 configuration error, 3 verification failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .criteria import CRITERION_NAMES, CriterionConfig
from .data import load_mnist_dataset, synth_blobs, split as split_dataset
from .network import (
    NetworkGraph,
    accuracy,
    build_lenet5,
    build_mlp,
    load_checkpoint,
    save_checkpoint,
)
from .optim import Adam
from .runner import (
    TrainSchedule,
    compression_percent,
    continuous_prune,
    criterion_rank_matrix,
    post_training_prune,
    prune_to_target,
    train_epoch,
)
from .verify import PROFILES, run_verification


class ConfigError(ValueError):
    pass


#: tuned learning rates per (model, dataset); anything else falls back to 1e-3
DEFAULT_LR = {
    ("mlp", "mnist"): 8.5e-4,
    ("lenet5", "mnist"): 1.4e-3,
    ("mlp", "fashion_mnist"): 1.5e-3,
    ("lenet5", "fashion_mnist"): 1.4e-3,
}


@dataclass
class ExperimentConfig:
    model: str = "mlp"
    layers: int = 7
    hidden: int = 100
    dataset: str = "mnist"
    lr: float | None = None
    batch_size: int = 128
    epochs: int = 50
    fine_tune_epochs: int = 10
    prune_interval: int = 1
    kl_scale: float = 1.0
    gate_lr_scale: float = 20.0
    noise_per_example: bool = True
    criterion: str = "bmrs_n"
    p1: int = 8
    p2: int = 23
    threshold: float | None = None
    target_compression: float | None = None
    log_lo: float = -20.0
    log_hi: float = 0.0
    seed: int = 0
    data_dir: str | None = None
    out: str = "runs/run"
    normalize: bool = True
    synth_n: int = 2000
    synth_classes: int = 4
    synth_dim: int = 16
    synth_separation: float = 6.0

    def validate(self) -> "ExperimentConfig":
        if self.model not in ("mlp", "lenet5"):
            raise ConfigError(f"unknown model {self.model!r}")
        if self.dataset not in ("mnist", "fashion_mnist", "synth"):
            raise ConfigError(f"unknown dataset {self.dataset!r}")
        if self.criterion not in CRITERION_NAMES:
            raise ConfigError(f"unknown criterion {self.criterion!r}")
        if self.criterion == "bmrs_u" and not (0 <= self.p1 < self.p2):
            raise ConfigError(
                f"bmrs_u needs 0 <= p1 < p2 (got p1={self.p1}, p2={self.p2}); "
                "p1 == p2 would leave an empty reduced support"
            )
        if self.criterion == "l2" and self.target_compression is None:
            raise ConfigError("the l2 baseline needs --target-compression")
        if self.layers < 1 or self.hidden < 1 or self.batch_size < 1:
            raise ConfigError("layers, hidden, and batch_size must be positive")
        if self.epochs < 1 or self.fine_tune_epochs < 0 or self.prune_interval < 1:
            raise ConfigError("bad schedule (epochs >= 1, fine_tune >= 0, interval >= 1)")
        if not (self.log_lo < self.log_hi):
            raise ConfigError("gate bounds need log_lo < log_hi")
        if self.lr is not None and self.lr <= 0:
            raise ConfigError("lr must be positive")
        return self

    def resolved_lr(self) -> float:
        if self.lr is not None:
            return self.lr
        return DEFAULT_LR.get((self.model, self.dataset), 1e-3)

    def schedule(self) -> TrainSchedule:
        return TrainSchedule(
            epochs_train=self.epochs,
            fine_tune_epochs=self.fine_tune_epochs,
            prune_interval=self.prune_interval,
            seed=self.seed,
            batch_size=self.batch_size,
            lr=self.resolved_lr(),
            kl_scale=self.kl_scale,
            noise_per_example=self.noise_per_example,
            gate_lr_scale=self.gate_lr_scale,
        )

    def criterion_config(self) -> CriterionConfig:
        return CriterionConfig(
            criterion=self.criterion,
            p1=self.p1,
            p2=self.p2,
            threshold=self.threshold,
        )

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)

    def content_hash(self) -> str:
        canonical = json.dumps(self.as_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode()).hexdigest()


def config_from_args(args: argparse.Namespace) -> ExperimentConfig:
    base: dict = {}
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            base = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file is not valid JSON: {exc}") from exc
        unknown = set(base) - {f.name for f in dataclasses.fields(ExperimentConfig)}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    cfg = ExperimentConfig(**base)
    for f in dataclasses.fields(ExperimentConfig):
        value = getattr(args, f.name, None)
        if value is not None:
            setattr(cfg, f.name, value)
    return cfg.validate()


def load_datasets(cfg: ExperimentConfig):
    if cfg.dataset == "synth":
        full = synth_blobs(cfg.synth_n, cfg.synth_classes, cfg.synth_dim,
                           cfg.synth_separation, seed=cfg.seed)
        trainval, test = split_dataset(full, train_fraction=0.8, seed=cfg.seed + 1)
        train, val = split_dataset(trainval, train_fraction=0.8, seed=cfg.seed + 2)
        return train, val, test
    try:
        return load_mnist_dataset(cfg.dataset, data_dir=cfg.data_dir, seed=cfg.seed,
                                  normalize=cfg.normalize)
    except FileNotFoundError as exc:
        raise ConfigError(str(exc)) from exc


def build_model(cfg: ExperimentConfig, in_shape, n_classes: int, with_gates: bool) -> NetworkGraph:
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(cfg.seed)))
    if cfg.model == "mlp":
        return build_mlp(rng, in_shape=in_shape, n_hidden_layers=cfg.layers,
                         hidden_dim=cfg.hidden, n_classes=n_classes,
                         with_gates=with_gates, log_lo=cfg.log_lo, log_hi=cfg.log_hi)
    return build_lenet5(rng, in_shape=in_shape, n_classes=n_classes,
                        with_gates=with_gates, log_lo=cfg.log_lo, log_hi=cfg.log_hi)


# ---------------------------------------------------------------------------
# Artifact writers
# ---------------------------------------------------------------------------

def write_run_csv(records, criterion: str, seed: int, path: Path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["epoch", "phase", "accuracy", "compression", "alive_counts",
                    "criterion", "seed", "n_prune_events", "degenerate"])
        for r in records:
            w.writerow([
                r.epoch, r.phase, repr(r.test_accuracy), repr(r.compression),
                ";".join(str(n) for n in r.n_alive), criterion, seed,
                len(r.events), int(r.degenerate),
            ])


def write_events_csv(records, path: Path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["epoch", "site", "structure", "score"])
        for r in records:
            for e in r.events:
                w.writerow([r.epoch, e.site, e.label, repr(e.score)])


def write_curve_csv(points, path: Path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["compression", "accuracy", "past_stop"])
        for p in points:
            w.writerow([repr(p.compression), repr(p.accuracy), int(p.past_stop)])


def write_manifest(cfg: ExperimentConfig, final: dict, path: Path) -> None:
    manifest = {
        "config": cfg.as_dict(),
        "config_hash": cfg.content_hash(),
        "final": final,
    }
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_train(args) -> int:
    cfg = config_from_args(args)
    train, val, test = load_datasets(cfg)
    n_classes = int(max(train.labels.max(), test.labels.max())) + 1
    in_shape = train.images.shape[1:]
    schedule = cfg.schedule()

    if cfg.criterion == "l2":
        # magnitude baseline: train plain, one-shot prune to the target
        # compression, then fine-tune
        net = build_model(cfg, in_shape, n_classes, with_gates=False)
        plain = TrainSchedule(
            epochs_train=schedule.epochs_train, fine_tune_epochs=0,
            prune_interval=schedule.prune_interval, seed=schedule.seed,
            batch_size=schedule.batch_size, lr=schedule.lr, kl_scale=0.0,
        )
        net, records = continuous_prune(net, train, test, None, plain)
        achieved = prune_to_target(net, cfg.criterion_config(), cfg.target_compression)
        fine = TrainSchedule(
            epochs_train=max(cfg.fine_tune_epochs, 1), fine_tune_epochs=0,
            seed=cfg.seed + 1, batch_size=cfg.batch_size, lr=cfg.resolved_lr(),
            kl_scale=0.0,
        )
        if cfg.fine_tune_epochs > 0:
            net, fine_records = continuous_prune(net, train, test, None, fine)
            records += [dataclasses.replace(r, epoch=r.epoch + cfg.epochs,
                                            compression=achieved, phase="fine_tune")
                        for r in fine_records]
    else:
        with_gates = cfg.criterion != "none"
        net = build_model(cfg, in_shape, n_classes, with_gates=with_gates)
        criterion = None if cfg.criterion == "none" else cfg.criterion_config()
        net, records = continuous_prune(net, train, test, criterion, schedule)

    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    write_run_csv(records, cfg.criterion, cfg.seed, out / "run.csv")
    write_events_csv(records, out / "events.csv")
    save_checkpoint(net, out / "model.bmrs")
    final = {
        "test_accuracy": records[-1].test_accuracy,
        "compression": records[-1].compression,
        "alive_counts": list(records[-1].n_alive),
        "val_size": int(val.n),
    }
    write_manifest(cfg, final, out / "manifest.json")
    print(f"[train] criterion={cfg.criterion} seed={cfg.seed} "
          f"accuracy={final['test_accuracy']:.2f}% "
          f"compression={final['compression']:.2f}% -> {out}")
    return 0


def cmd_prune_post(args) -> int:
    cfg = config_from_args(args)
    net = load_checkpoint(args.checkpoint)
    train, val, test = load_datasets(cfg)
    if tuple(net.input_shape) != tuple(train.images.shape[1:]):
        raise ConfigError(
            f"checkpoint input shape {net.input_shape} does not match dataset "
            f"{train.images.shape[1:]}"
        )
    if cfg.criterion in ("none",):
        raise ConfigError("prune-post needs a ranking criterion, not 'none'")
    if cfg.criterion != "l2" and not net.gate_indices():
        raise ConfigError(f"criterion {cfg.criterion!r} needs a gated checkpoint")

    points = post_training_prune(net, train, test, cfg.criterion_config(),
                                 cfg.schedule(), chunk_fraction=args.chunk_fraction)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    write_curve_csv(points, out / "curve.csv")

    # criterion rank agreement on the unpruned checkpoint
    reference = load_checkpoint(args.checkpoint)
    matrix_criteria = {
        "bmrs_n": CriterionConfig("bmrs_n"),
        "bmrs_u": CriterionConfig("bmrs_u", p1=cfg.p1, p2=cfg.p2),
        "snr": CriterionConfig("snr"),
        "mean_theta": CriterionConfig("mean_theta"),
        "l2": CriterionConfig("l2"),
    }
    if not reference.gate_indices():
        matrix_criteria = {"l2": matrix_criteria["l2"]}
    names, matrix = criterion_rank_matrix(reference, matrix_criteria)
    with open(out / "spearman.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow([""] + names)
        for i, name in enumerate(names):
            w.writerow([name] + [repr(v) for v in matrix[i]])

    write_manifest(cfg, {
        "curve_points": len(points),
        "max_compression": points[-1].compression if points else 0.0,
    }, out / "manifest.json")
    print(f"[prune-post] criterion={cfg.criterion} points={len(points)} -> {out}")
    return 0


def cmd_sweep_p1(args) -> int:
    cfg = config_from_args(args)
    try:
        p1_values = [int(v) for v in args.p1_list.split(",") if v.strip() != ""]
    except ValueError as exc:
        raise ConfigError(f"bad --p1-list: {exc}") from exc
    if not p1_values:
        raise ConfigError("--p1-list is empty")
    for p1 in p1_values:
        if not (0 <= p1 < cfg.p2):
            raise ConfigError(f"p1={p1} invalid: needs 0 <= p1 < p2={cfg.p2} "
                              "(p1 == p2 leaves an empty reduced support)")
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [cfg.seed]

    train, val, test = load_datasets(cfg)
    n_classes = int(max(train.labels.max(), test.labels.max())) + 1
    in_shape = train.images.shape[1:]

    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for p1 in p1_values:
        for seed in seeds:
            run_cfg = dataclasses.replace(cfg, criterion="bmrs_u", p1=p1, seed=seed)
            net = build_model(run_cfg, in_shape, n_classes, with_gates=True)
            net, records = continuous_prune(
                net, train, test, run_cfg.criterion_config(), run_cfg.schedule()
            )
            rows.append((p1, seed, records[-1].compression, records[-1].test_accuracy))
            print(f"[sweep-p1] p1={p1} seed={seed} "
                  f"compression={rows[-1][2]:.2f}% accuracy={rows[-1][3]:.2f}%")
    with open(out / "sweep.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["p1", "seed", "compression", "accuracy"])
        for row in rows:
            w.writerow([row[0], row[1], repr(row[2]), repr(row[3])])
    write_manifest(cfg, {"sweep_rows": len(rows)}, out / "manifest.json")
    return 0


def cmd_verify(args) -> int:
    report = run_verification(profile=args.profile, seed=args.seed or 0)
    text = json.dumps(report, indent=2)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(text + "\n")
    for suite in report["suites"]:
        status = "pass" if suite["passed"] else "FAIL"
        print(f"[verify] {suite['suite']}: {status} "
              f"({suite['n_checks'] - suite['n_failed']}/{suite['n_checks']} checks)")
        for failure in suite["failures"]:
            print(f"         {failure}")
    print(f"[verify] overall: {'pass' if report['passed'] else 'FAIL'}")
    return 0 if report["passed"] else 3


# ---------------------------------------------------------------------------

def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file; flags override its values")
    p.add_argument("--model", choices=["mlp", "lenet5"])
    p.add_argument("--layers", type=int)
    p.add_argument("--hidden", type=int)
    p.add_argument("--dataset", choices=["mnist", "fashion_mnist", "synth"])
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--fine-tune-epochs", dest="fine_tune_epochs", type=int)
    p.add_argument("--prune-interval", dest="prune_interval", type=int)
    p.add_argument("--kl-scale", dest="kl_scale", type=float)
    p.add_argument("--gate-lr-scale", dest="gate_lr_scale", type=float)
    p.add_argument("--criterion", choices=list(CRITERION_NAMES))
    p.add_argument("--p1", type=int)
    p.add_argument("--p2", type=int)
    p.add_argument("--threshold", type=float)
    p.add_argument("--target-compression", dest="target_compression", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--data-dir", dest="data_dir",
                   help="dataset root (default: $BMRS_DATA_DIR or ./data)")
    p.add_argument("--out")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bmrs",
                                     description="structured pruning experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="continuous pruning / baselines")
    _add_config_flags(p_train)
    p_train.set_defaults(fn=cmd_train)

    p_post = sub.add_parser("prune-post", help="post-training rank-based pruning")
    _add_config_flags(p_post)
    p_post.add_argument("checkpoint", help="model.bmrs from a train run")
    p_post.add_argument("--chunk-fraction", dest="chunk_fraction", type=float,
                        default=0.05)
    p_post.set_defaults(fn=cmd_prune_post)

    p_sweep = sub.add_parser("sweep-p1", help="continuous runs over p1 values")
    _add_config_flags(p_sweep)
    p_sweep.add_argument("--p1-list", dest="p1_list", required=True,
                         help="comma-separated p1 values")
    p_sweep.add_argument("--seeds", help="comma-separated seeds (default: --seed)")
    p_sweep.set_defaults(fn=cmd_sweep_p1)

    p_verify = sub.add_parser("verify", help="closed-form oracle suites")
    p_verify.add_argument("--profile", choices=sorted(PROFILES), default="default")
    p_verify.add_argument("--seed", type=int)
    p_verify.add_argument("--out")
    p_verify.set_defaults(fn=cmd_verify)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
