import json
import os

import pytest

from canguard.cli import run

COUNTS = "benign=1500,dos=200,gas=120,rpm=120,speed=120,steering_wheel=120"
SMALL_FLAGS = ["--conv-filters", "4,4,4", "--gru-units", "4,3", "--dense-units", "8,6"]


def files_under(root):
    return {os.path.join(d, f) for d, _, fs in os.walk(root) for f in fs}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    syn, pre, mdl = root / "synth", root / "prep", root / "model"
    assert run(["synth", "--seed", "7", "--counts", COUNTS, "--output-dir", str(syn)]) == 0
    assert run(["preprocess", "--input", str(syn / "synth.csv"), "--window-length", "8", "--seed", "7",
                "--smote-target", "600", "--output-dir", str(pre)]) == 0
    assert run(["train", "--input", str(pre), "--epochs", "4", "--patience", "2", "--seed", "7",
                *SMALL_FLAGS, "--output-dir", str(mdl)]) == 0
    return root


def test_synth_twice_identical(tmp_path):
    for d in ("a", "b"):
        assert run(["synth", "--seed", "7", "--counts", COUNTS, "--output-dir", str(tmp_path / d)]) == 0
    assert (tmp_path / "a" / "synth.csv").read_bytes() == (tmp_path / "b" / "synth.csv").read_bytes()
    assert json.loads((tmp_path / "a" / "synth.json").read_text())["seed"] == 7


def test_preprocess_outputs_and_seed(workspace):
    info = json.loads((workspace / "prep" / "preprocess.json").read_text())
    assert info["seed"] == 7 and info["T"] == 8
    assert info["train_class_counts"][1:] == [600] * 5


def test_train_then_evaluate_emits_headline_metrics(workspace, capsys):
    out = workspace / "eval"
    code = run(["evaluate", "--input", str(workspace / "prep"), "--checkpoint", str(workspace / "model" / "model.ckpt"),
                "--format", "json", "--seed", "7", "--output-dir", str(out)])
    assert code == 0
    payload = json.loads(capsys.readouterr().out)
    for key in ("accuracy", "precision_weighted", "recall_weighted", "f1_weighted"):
        assert 0.0 <= payload[key] <= 1.0
    assert payload["seed"] == 7
    assert (out / "metrics.txt").exists() and (out / "metrics.json").exists()
    hist = json.loads((workspace / "model" / "history.json").read_text())
    assert hist["seed"] == 7 and 1 <= len(hist["history"]["epochs"]) <= 4


def test_detect_accuracy_equals_evaluate_on_same_windows(workspace, tmp_path, capsys):
    from canguard.ingest import parse_csv, select_features
    from canguard.model import load
    from canguard.preprocess import apply_scaler, make_windows
    from canguard.training import evaluate

    replay_csv = tmp_path / "replay.csv"
    assert run(["synth", "--seed", "99", "--counts", "benign=200,dos=30,gas=20,rpm=20,speed=20,steering_wheel=20",
                "--output-dir", str(tmp_path)]) == 0
    (tmp_path / "synth.csv").rename(replay_csv)
    capsys.readouterr()
    ckpt = workspace / "model" / "model.ckpt"
    assert run(["detect", "--input", str(replay_csv), "--checkpoint", str(ckpt), "--seed", "7"]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    summary = json.loads(lines[-1])["summary"]
    model = load(ckpt)
    X, y = select_features(parse_csv(replay_csv))
    report = evaluate(model, apply_scaler(model.scaler, make_windows(X, y, model.config.T)))
    assert summary["windowed_accuracy"] == report.accuracy
    assert summary["warming_up"] == model.config.T - 1
    for line in lines[:-1]:
        alert = json.loads(line)
        assert alert["class"] != "BENIGN" and alert["prob"] >= 0.5


def test_ablate_table(workspace, capsys):
    out = workspace / "ablate"
    assert run(["ablate", "--input", str(workspace / "prep"), "--epochs", "1", "--patience", "1", "--seed", "3",
                *SMALL_FLAGS, "--output-dir", str(out)]) == 0
    table = (out / "ablation.txt").read_text().splitlines()
    assert table[0].split()[:4] == ["No.", "CNN", "GRU", "Attn."]
    assert len(json.loads((out / "ablation.json").read_text())["rows"]) == 4


def test_explain_writes_reports(workspace):
    out = workspace / "explain"
    assert run(["explain", "--input", str(workspace / "prep"), "--checkpoint", str(workspace / "model" / "model.ckpt"),
                "--samples", "3", "--output-dir", str(out)]) == 0
    payload = json.loads((out / "attribution.json").read_text())
    assert set(payload["reports"]) == {"kernel_shap", "permutation"}
    assert (out / "attention_heatmap.csv").exists()


def test_outputs_confined_to_output_dir(workspace, tmp_path):
    before = files_under(workspace)
    out = tmp_path / "only"
    assert run(["evaluate", "--input", str(workspace / "prep"), "--checkpoint",
                str(workspace / "model" / "model.ckpt"), "--output-dir", str(out)]) == 0
    assert files_under(workspace) == before
    assert files_under(tmp_path) == {str(out / "metrics.json"), str(out / "metrics.txt")}


def test_unknown_flag_is_usage_error(capsys):
    assert run(["synth", "--bogus"]) == 1
    assert "usage" in capsys.readouterr().err
    assert run([]) == 1


def test_data_errors_exit_2(tmp_path):
    bad = tmp_path / "bad.csv"
    bad.write_text("ID,DATA_0\n1,2\n")
    assert run(["preprocess", "--input", str(bad), "--output-dir", str(tmp_path / "o")]) == 2
    assert run(["evaluate", "--input", str(tmp_path), "--checkpoint", str(tmp_path / "none.ckpt"),
                "--output-dir", str(tmp_path / "o")]) == 2
