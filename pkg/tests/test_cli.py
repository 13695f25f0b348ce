import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from capsem.cli import main
from capsem.data import read_capsules


def run_cli(*argv, capsys=None):
    return main(list(argv))


@pytest.fixture
def toy_files(tmp_path):
    """A small generated dataset plus a quickly trained model."""
    data = tmp_path / "toy.caps"
    model = tmp_path / "toy.model"
    config = tmp_path / "config.json"
    config.write_text(json.dumps(
        {"train": {"train_samples": 300, "test_samples": 100}}))
    assert main(["gen-data", "--out", str(data), "--n", "40",
                 "--seed", "7"]) == 0
    assert main(["train", "--out", str(model), "--epochs", "2", "--seed", "0",
                 "--config", str(config)]) == 0
    return data, model, config


# ---------------------------------------------------------------------------
# gen-data


def test_gen_data_round_trips(tmp_path, capsys):
    out = tmp_path / "d.caps"
    assert main(["gen-data", "--out", str(out), "--n", "100",
                 "--seed", "7"]) == 0
    batch, labels = read_capsules(out)
    assert len(labels) == 100
    assert np.asarray(batch.poses).shape[0] == 100
    text = capsys.readouterr().out
    assert "100 samples" in text


def test_gen_data_is_byte_deterministic(tmp_path):
    a = tmp_path / "a.caps"
    b = tmp_path / "b.caps"
    assert main(["gen-data", "--out", str(a), "--n", "25", "--seed", "3"]) == 0
    assert main(["gen-data", "--out", str(b), "--n", "25", "--seed", "3"]) == 0
    assert a.read_bytes() == b.read_bytes()


def test_gen_data_empty_file_is_valid(tmp_path):
    out = tmp_path / "empty.caps"
    assert main(["gen-data", "--out", str(out), "--n", "0", "--seed", "1"]) == 0
    batch, labels = read_capsules(out)
    assert len(labels) == 0


def test_gen_data_malformed_spec_exits_2(tmp_path):
    spec = tmp_path / "spec.json"
    spec.write_text(json.dumps({"n_classes": 5, "bogus_knob": 3}))
    out = tmp_path / "d.caps"
    assert main(["gen-data", "--spec", str(spec), "--out", str(out),
                 "--n", "5"]) == 2


# ---------------------------------------------------------------------------
# train


def test_train_epoch0_deterministic(tmp_path, capsys):
    config = tmp_path / "c.json"
    config.write_text(json.dumps(
        {"train": {"train_samples": 100, "test_samples": 50}}))

    def epoch0():
        assert main(["train", "--out", str(tmp_path / "m.model"),
                     "--epochs", "1", "--seed", "5",
                     "--config", str(config)]) == 0
        lines = capsys.readouterr().out.splitlines()
        return [l for l in lines if l.startswith("0,")][0]

    assert epoch0() == epoch0()


def test_train_no_mixup_flag(tmp_path, capsys):
    config = tmp_path / "c.json"
    config.write_text(json.dumps(
        {"train": {"train_samples": 100, "test_samples": 50}}))
    assert main(["train", "--out", str(tmp_path / "m.model"), "--epochs", "1",
                 "--seed", "5", "--config", str(config), "--no-mixup"]) == 0
    assert "model written" in capsys.readouterr().out


def test_train_unknown_config_key_exits_2(tmp_path):
    config = tmp_path / "c.json"
    config.write_text(json.dumps({"train": {"learning_rate": 1.0}}))
    assert main(["train", "--out", str(tmp_path / "m.model"),
                 "--config", str(config)]) == 2


def test_train_writes_log_csv(tmp_path):
    config = tmp_path / "c.json"
    config.write_text(json.dumps(
        {"train": {"train_samples": 100, "test_samples": 50}}))
    log = tmp_path / "log.csv"
    assert main(["train", "--out", str(tmp_path / "m.model"), "--epochs", "2",
                 "--seed", "0", "--config", str(config),
                 "--log", str(log)]) == 0
    rows = log.read_text().splitlines()
    assert rows[0] == "epoch,val_loss,val_accuracy"
    assert len(rows) == 4  # header + epochs 0..2


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_train_nonfinite_loss_exits_3(tmp_path):
    config = tmp_path / "c.json"
    config.write_text(json.dumps({
        "train": {"train_samples": 60, "test_samples": 20,
                  "lr_start": 1e200, "lr_peak": 1e200},
    }))
    assert main(["train", "--out", str(tmp_path / "m.model"), "--epochs", "2",
                 "--seed", "0", "--config", str(config)]) == 3


def test_train_threads_match_single_thread_epoch0(tmp_path, capsys):
    config = tmp_path / "c.json"
    config.write_text(json.dumps(
        {"train": {"train_samples": 100, "test_samples": 40}}))

    def first_epochs(threads):
        assert main(["train", "--out", str(tmp_path / "m.model"),
                     "--epochs", "1", "--seed", "5", "--config", str(config),
                     "--threads", str(threads)]) == 0
        out = capsys.readouterr().out.splitlines()
        return [l for l in out if l and l[0].isdigit()]

    a = first_epochs(2)
    b = first_epochs(2)
    assert a == b  # deterministic under threading


# ---------------------------------------------------------------------------
# route


def test_route_prints_probabilities_and_accuracy(toy_files, capsys):
    data, model, _ = toy_files
    capsys.readouterr()
    assert main(["route", "--model", str(model), "--input", str(data)]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == "sample,p0,p1,p2,p3,p4"
    probs = np.array([[float(x) for x in l.split(",")[1:]]
                      for l in lines[1:41]])
    np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-4)
    assert lines[41].startswith("accuracy,")


def test_route_accuracy_matches_train_report(tmp_path, capsys):
    # train, then route the validation file: accuracies must agree
    config = tmp_path / "c.json"
    config.write_text(json.dumps(
        {"train": {"train_samples": 300, "test_samples": 100}}))
    model = tmp_path / "m.model"
    assert main(["train", "--out", str(model), "--epochs", "3", "--seed", "1",
                 "--config", str(config)]) == 0
    train_out = capsys.readouterr().out.splitlines()
    final_acc = float([l for l in train_out
                       if l and l[0].isdigit()][-1].split(",")[2])

    val = tmp_path / "val.caps"
    from capsem.data import ConstellationSpec, make_dataset, write_capsules
    batch, labels = make_dataset(ConstellationSpec(), 100, start=300)
    write_capsules(val, batch, labels)
    assert main(["route", "--model", str(model), "--input", str(val)]) == 0
    route_out = capsys.readouterr().out.splitlines()
    acc = float([l for l in route_out
                 if l.startswith("accuracy,")][0].split(",")[1])
    assert acc == pytest.approx(final_acc, abs=1e-9)


def test_route_iters_flag_matches_library(toy_files, capsys):
    data, model, _ = toy_files
    from capsem.classifier import CapsuleClassifier
    from capsem.data import read_model
    layers, n_classes = read_model(model)
    lib = CapsuleClassifier(layers, n_classes)
    caps, _ = read_capsules(data)
    expected = lib.predict_proba(caps, n_iters=1)

    capsys.readouterr()
    assert main(["route", "--model", str(model), "--input", str(data),
                 "--iters", "1"]) == 0
    lines = capsys.readouterr().out.splitlines()
    got = np.array([[float(x) for x in l.split(",")[1:]]
                    for l in lines[1:41]])
    np.testing.assert_allclose(got, expected[:40], atol=1e-6)


def test_route_trace_rows_sum_to_one(toy_files, tmp_path, capsys):
    data, model, _ = toy_files
    trace = tmp_path / "trace.json"
    assert main(["route", "--model", str(model), "--input", str(data),
                 "--trace", str(trace)]) == 0
    doc = json.loads(trace.read_text())
    assert len(doc["layers"]) == 2
    for layer in doc["layers"]:
        for it in layer["iterations"]:
            probs = np.array(it["probs"])
            np.testing.assert_allclose(probs.sum(axis=2), 1.0, atol=1e-6)


def test_route_dim_mismatch_exits_2(toy_files, tmp_path, capsys):
    _, model, _ = toy_files
    from capsem.data import write_capsules
    from capsem.routing import CapsuleBatch
    bad = tmp_path / "bad.caps"
    write_capsules(bad, CapsuleBatch(np.zeros((2, 3)), np.zeros((2, 3, 2, 2))))
    assert main(["route", "--model", str(model), "--input", str(bad)]) == 2
    err = capsys.readouterr().err
    assert "(2, 2)" in err and "(4, 4)" in err  # found vs expected dims


# ---------------------------------------------------------------------------
# gradcheck / bench / inspect


def test_gradcheck_passes_at_default_tolerance(capsys):
    assert main(["gradcheck", "--seed", "0", "--tol", "1e-4"]) == 0
    assert "gradcheck passed" in capsys.readouterr().out


def test_gradcheck_fails_with_absurd_tolerance(capsys):
    assert main(["gradcheck", "--seed", "0", "--tol", "1e-18"]) == 3


def test_bench_csv_schema(tmp_path, capsys):
    out = tmp_path / "bench.csv"
    assert main(["bench", "--grid", "n_in=2,4;n_out=2;variant=fixed",
                 "--reps", "1", "--csv", str(out)]) == 0
    with open(out) as f:
        rows = list(csv.DictReader(f))
    assert len(rows) == 2
    for row in rows:
        assert row["variant"] == "fixed"
        assert int(row["ns_per_sample_forward"]) > 0
        assert int(row["ns_per_sample_backward"]) > 0


def test_bench_rejects_unknown_grid_key(tmp_path):
    assert main(["bench", "--grid", "bogus=1", "--csv",
                 str(tmp_path / "b.csv")]) == 2


def test_inspect_reports_sharing_factors(toy_files, capsys):
    _, model, _ = toy_files
    capsys.readouterr()
    assert main(["inspect", "--model", str(model)]) == 0
    out = capsys.readouterr().out
    assert "mode=variable_input" in out
    assert "mode=fixed" in out
    assert "factor=32 (= n_in)" in out
    assert "weight_factor=160 (= n_in*n_out)" in out


def test_usage_error_exits_1():
    result = subprocess.run(
        [sys.executable, "-m", "capsem", "route", "--model"],
        capture_output=True)
    assert result.returncode == 1


def test_missing_file_exits_2(tmp_path):
    assert main(["route", "--model", str(tmp_path / "nope.model"),
                 "--input", str(tmp_path / "nope.caps")]) == 2
