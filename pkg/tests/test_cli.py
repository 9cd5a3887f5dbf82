"""CLI subcommands: artifacts, exit codes, config handling."""

import csv
import json
from pathlib import Path

import numpy as np
import pytest

from bmrs.cli import ExperimentConfig, main

SYNTH_ARGS = [
    "--dataset", "synth", "--model", "mlp", "--layers", "1", "--hidden", "8",
    "--epochs", "2", "--fine-tune-epochs", "1", "--batch-size", "32",
    "--lr", "0.002",
]


def run_train(tmp_path, *extra, criterion="none", seed="0", name="run"):
    out = tmp_path / name
    code = main(["train", *SYNTH_ARGS, "--criterion", criterion,
                 "--seed", seed, "--out", str(out), *extra])
    return code, out


class TestTrain:
    def test_none_criterion_keeps_zero_compression(self, tmp_path):
        code, out = run_train(tmp_path)
        assert code == 0
        rows = list(csv.DictReader(open(out / "run.csv")))
        assert all(float(r["compression"]) == 0.0 for r in rows)
        assert (out / "model.bmrs").exists()
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["final"]["compression"] == 0.0

    def test_seed_determinism_of_run_csv(self, tmp_path):
        _, out_a = run_train(tmp_path, criterion="bmrs_n", seed="7", name="a")
        _, out_b = run_train(tmp_path, criterion="bmrs_n", seed="7", name="b")
        assert (out_a / "run.csv").read_text() == (out_b / "run.csv").read_text()

    def test_manifest_roundtrip_reproduces_run(self, tmp_path):
        _, out_a = run_train(tmp_path, criterion="snr", seed="3", name="a")
        manifest = json.loads((out_a / "manifest.json").read_text())
        cfg_path = tmp_path / "replay.json"
        replay_cfg = {k: v for k, v in manifest["config"].items() if k != "out"}
        cfg_path.write_text(json.dumps(replay_cfg))
        out_b = tmp_path / "b"
        code = main(["train", "--config", str(cfg_path), "--out", str(out_b)])
        assert code == 0
        assert (out_a / "run.csv").read_text() == (out_b / "run.csv").read_text()

    def test_invalid_config_exits_2_without_outputs(self, tmp_path):
        out = tmp_path / "run"
        code = main(["train", *SYNTH_ARGS, "--criterion", "bmrs_u",
                     "--p1", "23", "--p2", "23", "--out", str(out)])
        assert code == 2
        assert not out.exists()

    def test_missing_data_dir_exits_2(self, tmp_path):
        out = tmp_path / "run"
        code = main(["train", "--dataset", "mnist", "--data-dir",
                     str(tmp_path / "nowhere"), "--epochs", "1", "--out", str(out)])
        assert code == 2
        assert not out.exists()

    def test_l2_needs_target_compression(self, tmp_path):
        code, out = run_train(tmp_path, criterion="l2")
        assert code == 2

    def test_l2_one_shot_baseline(self, tmp_path):
        code, out = run_train(tmp_path, "--target-compression", "30",
                              criterion="l2")
        assert code == 0
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["final"]["compression"] >= 30.0

    def test_csv_parses_under_strict_rules(self, tmp_path):
        _, out = run_train(tmp_path, criterion="bmrs_n")
        with open(out / "run.csv", newline="") as f:
            rows = list(csv.reader(f))
        header = rows[0]
        assert all(len(r) == len(header) for r in rows)
        # numeric fields carry full double precision (repr round-trip)
        acc = rows[1][header.index("accuracy")]
        assert float(acc) == float(repr(float(acc)))


class TestPrunePost:
    @pytest.fixture()
    def checkpoint(self, tmp_path):
        _, out = run_train(tmp_path, criterion="none", name="train")
        # gates are needed for the rank matrix; the 'none' run is gateless,
        # so train a gated run without pruning via an impossible threshold
        out2 = tmp_path / "gated"
        main(["train", *SYNTH_ARGS, "--criterion", "snr", "--threshold", "0",
              "--seed", "0", "--out", str(out2)])
        return out2 / "model.bmrs"

    def test_curve_and_spearman_artifacts(self, tmp_path, checkpoint):
        out = tmp_path / "post"
        code = main(["prune-post", str(checkpoint), *SYNTH_ARGS,
                     "--criterion", "bmrs_n", "--chunk-fraction", "0.25",
                     "--out", str(out)])
        assert code == 0
        points = list(csv.DictReader(open(out / "curve.csv")))
        assert float(points[0]["compression"]) == 0.0
        comps = [float(p["compression"]) for p in points]
        assert all(b > a for a, b in zip(comps, comps[1:]))
        with open(out / "spearman.csv", newline="") as f:
            rows = list(csv.reader(f))
        names = rows[0][1:]
        diag = {r[0]: float(r[1 + i]) for i, r in enumerate(rows[1:])}
        for name in names:
            assert diag[name] == 1.0

    def test_checkpoint_dataset_mismatch_exits_2(self, tmp_path, checkpoint):
        out = tmp_path / "post"
        code = main(["prune-post", str(checkpoint), "--dataset", "synth",
                     "--criterion", "bmrs_n", "--out", str(out),
                     "--model", "mlp", "--layers", "1", "--hidden", "8"])
        # default synth dim differs from the training config's 16-dim default
        # only if flags diverge; force a different input dim via config file
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"dataset": "synth", "synth_dim": 5,
                                   "criterion": "bmrs_n"}))
        code = main(["prune-post", str(checkpoint), "--config", str(cfg),
                     "--out", str(out)])
        assert code == 2


class TestSweep:
    def test_rejects_equal_p1_p2(self, tmp_path):
        out = tmp_path / "sweep"
        code = main(["sweep-p1", *SYNTH_ARGS, "--p1-list", "23", "--p2", "23",
                     "--out", str(out)])
        assert code == 2

    def test_singleton_matches_train(self, tmp_path):
        out = tmp_path / "sweep"
        code = main(["sweep-p1", *SYNTH_ARGS, "--p1-list", "8", "--seed", "5",
                     "--out", str(out)])
        assert code == 0
        rows = list(csv.DictReader(open(out / "sweep.csv")))
        assert len(rows) == 1 and rows[0]["p1"] == "8" and rows[0]["seed"] == "5"

        _, tout = run_train(tmp_path, "--p1", "8", criterion="bmrs_u", seed="5")
        manifest = json.loads((tout / "manifest.json").read_text())
        assert float(rows[0]["compression"]) == manifest["final"]["compression"]
        assert float(rows[0]["accuracy"]) == manifest["final"]["test_accuracy"]

    def test_multiple_values_and_seeds(self, tmp_path):
        out = tmp_path / "sweep"
        code = main(["sweep-p1", *SYNTH_ARGS, "--p1-list", "4,8",
                     "--seeds", "0,1", "--out", str(out)])
        assert code == 0
        rows = list(csv.DictReader(open(out / "sweep.csv")))
        assert {(r["p1"], r["seed"]) for r in rows} == {
            ("4", "0"), ("4", "1"), ("8", "0"), ("8", "1")
        }


class TestVerify:
    def test_quick_profile_passes_and_writes_report(self, tmp_path):
        out = tmp_path / "verify"
        code = main(["verify", "--profile", "quick", "--out", str(out)])
        assert code == 0
        report = json.loads((out / "report.json").read_text())
        assert report["passed"] is True
        assert {s["suite"] for s in report["suites"]} >= {
            "bmrs_n_closed_form", "bmrs_u_closed_form", "kl_closed_form",
            "sampler_ks", "moments",
        }
        for suite in report["suites"]:
            assert suite["n_checks"] > 0


class TestConfig:
    def test_defaults_mirror_tuned_values(self):
        cfg = ExperimentConfig().validate()
        assert cfg.model == "mlp" and cfg.layers == 7 and cfg.hidden == 100
        assert cfg.batch_size == 128
        assert cfg.resolved_lr() == pytest.approx(8.5e-4)
        assert cfg.epochs == 50 and cfg.fine_tune_epochs == 10
        assert (cfg.log_lo, cfg.log_hi) == (-20.0, 0.0)
        lenet = ExperimentConfig(model="lenet5")
        assert lenet.resolved_lr() == pytest.approx(1.4e-3)

    def test_unknown_config_keys_rejected(self, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"modell": "mlp"}))
        code = main(["train", "--config", str(cfg)])
        assert code == 2

    def test_flags_override_config_file(self, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"dataset": "synth", "seed": 1, "epochs": 2,
                                   "fine_tune_epochs": 0, "layers": 1,
                                   "hidden": 8, "criterion": "none"}))
        out = tmp_path / "run"
        code = main(["train", "--config", str(cfg), "--seed", "9",
                     "--out", str(out)])
        assert code == 0
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["config"]["seed"] == 9
        assert manifest["config"]["epochs"] == 2

    def test_config_hash_is_content_addressed(self):
        a = ExperimentConfig(seed=1)
        b = ExperimentConfig(seed=1)
        c = ExperimentConfig(seed=2)
        assert a.content_hash() == b.content_hash() != c.content_hash()
