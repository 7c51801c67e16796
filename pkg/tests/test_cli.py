import csv
import json
import time

import numpy as np
import pytest

import pmnet.trainer
from pmnet import cli
from pmnet.data import load_checkpoint

TINY_MODEL = ["--hidden", "16", "--embed-dim", "8", "--heads", "2", "--key-dim", "8", "--value-dim", "8",
              "--phase1-epochs", "8", "--phase2-epochs", "10", "--phase1-lr", "5e-3", "--phase2-lr", "5e-3"]


def _synth(out, *extra):
    args = ["synth", "--out-dir", str(out), "--num-scenes", "4", "--feature-dim", "8", "--samples-per-scene", "20",
            "--num-multiscene", "30", "--num-multiscene-test", "60", "--noise-sigma", "0.5",
            "--center-scale", "2.0", *extra]
    assert cli.main(args) == 0
    return out


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    return _synth(tmp_path_factory.mktemp("data"))


@pytest.fixture(scope="module")
def trained_dir(tmp_path_factory, data_dir):
    out = tmp_path_factory.mktemp("run")
    assert cli.main(["train", "--data-dir", str(data_dir), "--out-dir", str(out), *TINY_MODEL]) == 0
    return out


def test_synth_default_writes_three_tables(tmp_path):
    assert cli.main(["synth", "--out-dir", str(tmp_path)]) == 0
    for name in ("single.csv", "multi_train.csv", "multi_test.csv", "manifest.json"):
        assert (tmp_path / name).exists()
    with open(tmp_path / "single.csv") as fh:
        assert sum(1 for _ in fh) == 1601


def test_synth_byte_identical(tmp_path):
    a, b = _synth(tmp_path / "a"), _synth(tmp_path / "b")
    for name in ("single.csv", "multi_train.csv", "multi_test.csv", "manifest.json"):
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_synth_manifest_lists_scenes(tmp_path):
    assert cli.main(["synth", "--out-dir", str(tmp_path), "--num-scenes", "20", "--samples-per-scene", "2",
                     "--num-multiscene", "5", "--num-multiscene-test", "5"]) == 0
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["scene_names"] == [f"scene{i:02d}" for i in range(20)]


def test_synth_bad_config_is_validation_error(tmp_path, capsys):
    assert cli.main(["synth", "--out-dir", str(tmp_path), "--scenes-min", "3", "--scenes-max", "2"]) == 1
    assert capsys.readouterr().err.startswith("error:")


def test_train_outputs(trained_dir):
    for name in ("model.pmnet", "loss_history.csv", "metrics.csv", "metrics.txt", "loss_curves.svg"):
        assert (trained_dir / name).exists()
    rows = list(csv.DictReader(open(trained_dir / "loss_history.csv")))
    assert [r["phase"] for r in rows].count("prototype") == 8
    assert [r["phase"] for r in rows].count("retrieval") == 10
    assert "embedding=fine-tuned" in (trained_dir / "metrics.txt").read_text()
    assert (trained_dir / "loss_curves.svg").read_text().lstrip().startswith("<?xml")


def test_train_freeze_noted(tmp_path, data_dir, capsys):
    assert cli.main(["train", "--data-dir", str(data_dir), "--out-dir", str(tmp_path), "--freeze-embedding",
                     "--fig-format", "none", *TINY_MODEL]) == 0
    assert "embedding=frozen" in (tmp_path / "metrics.txt").read_text()
    assert "phase-2 embedding: frozen" in capsys.readouterr().out


def test_rap_with_many_heads_rejected_before_training(tmp_path, data_dir, capsys):
    code = cli.main(["train", "--data-dir", str(data_dir), "--out-dir", str(tmp_path / "o"), *TINY_MODEL,
                     "--mode", "relevance-as-prediction"])
    assert code == 1
    assert "heads=1" in capsys.readouterr().err
    assert not (tmp_path / "o").exists()


def test_train_missing_inputs(tmp_path, capsys):
    assert cli.main(["train", "--out-dir", str(tmp_path)]) == 1
    assert cli.main(["train", "--single", str(tmp_path / "nope.csv"), "--multi-train", "x"]) == 1
    assert all(l.startswith("error:") for l in capsys.readouterr().err.splitlines())


def test_train_bad_table_reports_line(tmp_path, data_dir, capsys):
    bad = tmp_path / "single.csv"
    lines = (data_dir / "single.csv").read_text().splitlines()
    lines[3] = lines[3].rsplit(",", 2)[0]
    bad.write_text("\n".join(lines) + "\n")
    assert cli.main(["train", "--single", str(bad), "--multi-train", str(data_dir / "multi_train.csv"),
                     "--out-dir", str(tmp_path / "o"), *TINY_MODEL]) == 1
    assert ":4:" in capsys.readouterr().err


def test_evaluate_matches_train_report(tmp_path, trained_dir, data_dir):
    assert cli.main(["evaluate", "--checkpoint", str(trained_dir / "model.pmnet"), "--data-dir", str(data_dir),
                     "--out-dir", str(tmp_path)]) == 0
    assert (tmp_path / "metrics.csv").read_text() == (trained_dir / "metrics.csv").read_text()
    assert "# threshold = 0.5" in (tmp_path / "metrics.txt").read_text()


def test_evaluate_threshold_sweep(tmp_path, trained_dir, data_dir):
    assert cli.main(["evaluate", "--checkpoint", str(trained_dir / "model.pmnet"), "--data-dir", str(data_dir),
                     "--out-dir", str(tmp_path), "--sweep", "9"]) == 0
    rows = list(csv.DictReader(open(tmp_path / "threshold_curve.csv")))
    assert len(rows) == 9
    assert [float(r["threshold"]) for r in rows] == pytest.approx([i / 10 for i in range(1, 10)])
    assert (tmp_path / "threshold_curve.svg").exists()


def test_evaluate_corrupt_checkpoint_is_runtime_error(tmp_path, trained_dir, data_dir, capsys):
    raw = (trained_dir / "model.pmnet").read_bytes()
    (tmp_path / "bad.pmnet").write_bytes(raw[: len(raw) // 2])
    assert cli.main(["evaluate", "--checkpoint", str(tmp_path / "bad.pmnet"), "--data-dir", str(data_dir),
                     "--out-dir", str(tmp_path)]) == 2
    assert capsys.readouterr().err.startswith("error:")


def test_config_file_and_precedence(tmp_path, data_dir, monkeypatch):
    cfg = tmp_path / "run.cfg"
    cfg.write_text(f"# tiny\ndata_dir = {data_dir}\nout_dir = {tmp_path / 'from_cfg'}\nheads = 3\n"
                   "freeze_embedding = true\n")
    args = cli.parse_args(["train", str(cfg), "--heads", "4"])
    assert args.heads == 4 and args.freeze_embedding and args.out_dir == str(tmp_path / "from_cfg")
    monkeypatch.setenv("PMNET_OUTPUT_DIR", str(tmp_path / "from_env"))
    assert cli.parse_args(["train", str(cfg)]).out_dir == str(tmp_path / "from_env")
    assert cli.parse_args(["train", str(cfg), "--out-dir", "flag"]).out_dir == "flag"
    assert cli.parse_args(["train"]).out_dir == str(tmp_path / "from_env")


def test_config_file_bad_line(tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("heads 3\n")
    assert cli.main(["train", str(cfg)]) == 1
    assert "bad.cfg:1" in capsys.readouterr().err


def test_quickstart_under_a_minute(tmp_path):
    # S=8 with 2000 single-scene samples and the default model and schedule
    data = tmp_path / "d"
    assert cli.main(["synth", "--out-dir", str(data), "--num-scenes", "8", "--feature-dim", "32",
                     "--samples-per-scene", "250", "--num-multiscene", "90", "--num-multiscene-test", "200",
                     "--noise-sigma", "1.0"]) == 0
    t0 = time.perf_counter()
    assert cli.main(["train", "--data-dir", str(data), "--out-dir", str(tmp_path / "r")]) == 0
    assert time.perf_counter() - t0 < 60


def test_ablate_heads_logs_every_run(tmp_path, data_dir):
    assert cli.main(["ablate", "--data-dir", str(data_dir), "--out-dir", str(tmp_path), "--sweep", "heads",
                     *TINY_MODEL]) == 0
    runs = list(csv.DictReader(open(tmp_path / "ablation_heads_runs.csv")))
    assert len(runs) == 18
    assert sorted({float(r["x"]) for r in runs}) == [1, 5, 10, 20, 30, 40]
    assert all(r["status"] == "ok" for r in runs)
    summary = list(csv.DictReader(open(tmp_path / "ablation_heads_summary.csv")))
    assert len(summary) == 6 and all(int(r["n"]) == 3 for r in summary)
    assert (tmp_path / "ablation_heads.svg").exists()
    assert (tmp_path / "ablation_heads.dat").read_text().startswith("# series x mean_f1 std_f1")


def test_ablate_k1_kmeans_equals_mean(tmp_path, data_dir):
    assert cli.main(["ablate", "--data-dir", str(data_dir), "--out-dir", str(tmp_path), "--sweep", "clusters",
                     "--cluster-counts", "1", *TINY_MODEL]) == 0
    runs = list(csv.DictReader(open(tmp_path / "ablation_clusters_runs.csv")))
    by = {(r["setting"], r["seed"]): r["mean_f1"] for r in runs}
    for seed in ("0", "1", "2"):
        assert by[("mean k=1", seed)] == by[("kmeans k=1", seed)] == by[("agglomerative k=1", seed)]


def test_ablate_freeze_has_both_columns(tmp_path, data_dir, capsys):
    assert cli.main(["ablate", "--data-dir", str(data_dir), "--out-dir", str(tmp_path), "--sweep", "freeze",
                     "--seeds", "2", *TINY_MODEL]) == 0
    out = capsys.readouterr().out
    assert "trainable" in out and "frozen" in out
    settings = {r["setting"] for r in csv.DictReader(open(tmp_path / "ablation_freeze_summary.csv"))}
    assert settings == {"trainable", "frozen"}


def test_ablate_unknown_sweep(tmp_path, data_dir):
    assert cli.main(["ablate", "--data-dir", str(data_dir), "--out-dir", str(tmp_path), "--sweep", "nope"]) == 1


def test_gradcheck_passes(capsys):
    assert cli.main(["gradcheck", "--seeds", "2"]) == 0
    out = capsys.readouterr().out
    assert "FAIL" not in out and "out.W" in out and "head.0.W" in out


def test_gradcheck_negative_control(monkeypatch, capsys):
    real = pmnet.trainer.retrieval_backward

    def corrupted(cache, grad_logits, memory, module):
        grads, gemb = real(cache, grad_logits, memory, module)
        grads["retr.wq"] = grads["retr.wq"] * 1.01
        return grads, gemb

    monkeypatch.setattr(pmnet.trainer, "retrieval_backward", corrupted)
    assert cli.main(["gradcheck", "--seeds", "1", "--checks", "retrieval"]) == 2
    err = capsys.readouterr().err
    assert "retr.wq" in err and "index=" in err and err.startswith("error:")


def test_loaded_checkpoint_config(trained_dir):
    ck = load_checkpoint(trained_dir / "model.pmnet")
    assert ck.config["num_heads"] == 2 and ck.config["phase2"]["max_epochs"] == 10
    assert np.isfinite(ck.model.predict_proba(np.zeros((1, 8)))).all()
