import csv
import json

import pytest

from cimlab import cli
from cimlab.config import ConfigError

SMALL = """
seeds = [0, 1]

[dataset]
n = 600
n_test = 200

[model]
epochs = 1

[faults]
scenarios = 3
"""


def write_config(tmp_path, body):
    path = tmp_path / "cfg.toml"
    path.write_text(SMALL + body)
    return path


def run_cli(monkeypatch, *argv, threads="1"):
    monkeypatch.setenv("LAB_THREADS", threads)
    return cli.main([str(a) for a in argv])


def test_sweep_rows(tmp_path, monkeypatch):
    cfg = write_config(tmp_path, '\n[sweep]\ntask = "inject"\nparam = "faults.stuck_on_rate"\n'
                                 'values = [0.0, 0.01, 0.02, 0.05, 0.1]\n')
    out = tmp_path / "sweep"
    assert run_cli(monkeypatch, "sweep", "--config", cfg, "--out", out) == 0
    rows = list(csv.DictReader((out / "per_seed.csv").open()))
    assert len(rows) == 10
    points = {(r["point"], r["seed"]) for r in rows}
    assert len(points) == 10
    zero = [r for r in rows if r["point"] == "faults.stuck_on_rate=0.0"]
    assert all(float(r["faults"]) == 0 for r in zero)
    row = next(r for r in rows if r["point"] == "faults.stuck_on_rate=0.05" and r["seed"] == "1")
    assert row["artifacts"] == "faults.stuck_on_rate_0.05/seed_1/faultmap.txt"
    assert (out / row["artifacts"]).exists()


def test_repeat_runs_identical(tmp_path, monkeypatch):
    cfg = write_config(tmp_path, "")
    summaries = []
    for i, threads in enumerate(("1", "2")):
        out = tmp_path / f"r{i}"
        assert run_cli(monkeypatch, "inject", "--config", cfg, "--out", out, threads=threads) == 0
        s = json.loads((out / "summary.json").read_text())
        s.pop("wall_time")
        summaries.append(s)
    assert summaries[0] == summaries[1]
    assert summaries[0]["complete"] and len(summaries[0]["config_sha256"]) == 64


def test_ood_eval_fields(tmp_path, monkeypatch, capsys):
    cfg = write_config(tmp_path, "")
    out = tmp_path / "ood"
    assert run_cli(monkeypatch, "ood-eval", "--config", cfg, "--seed", 0, "--out", out) == 0
    metrics = json.loads((out / "summary.json").read_text())["metrics"][""]
    assert {"auroc", "detection_rate_at_5pct_fpr"} <= set(metrics)
    assert "auroc=" in capsys.readouterr().out


def test_failure_leaves_partial_marker(tmp_path, monkeypatch):
    cfg = write_config(tmp_path, "")
    text = cfg.read_text().replace("[dataset]", '[dataset]\nkind = "idx"\ntrain_images = "missing-images"\n'
                                               'train_labels = "missing-labels"')
    cfg.write_text(text)
    out = tmp_path / "broken"
    assert run_cli(monkeypatch, "train", "--config", cfg, "--out", out) == 1
    assert (out / cli.PARTIAL_MARKER).exists()
    assert json.loads((out / "summary.json").read_text())["complete"] is False


def test_config_errors_exit_2(tmp_path, monkeypatch, capsys):
    cfg = tmp_path / "bad.toml"
    cfg.write_text("[model]\nwidth = 3\n")
    assert run_cli(monkeypatch, "train", "--config", cfg, "--out", tmp_path / "o") == 2
    assert "width" in capsys.readouterr().err
    good = write_config(tmp_path, "")
    assert run_cli(monkeypatch, "train", "--config", good, "--out", tmp_path / "o", threads="zero") == 2


@pytest.mark.parametrize("raw, expected", [("1", 1), ("4", 4), ("", None)])
def test_lab_threads(raw, expected):
    n = cli.lab_threads({"LAB_THREADS": raw})
    assert n == expected if expected else n >= 1


@pytest.mark.parametrize("raw", ["0", "-2", "two"])
def test_lab_threads_rejects(raw):
    with pytest.raises(ConfigError):
        cli.lab_threads({"LAB_THREADS": raw})


def test_report(tmp_path, monkeypatch, capsys):
    cfg = write_config(tmp_path, "")
    out = tmp_path / "train"
    assert run_cli(monkeypatch, "train", "--config", cfg, "--seed", 2, "--out", out) == 0
    capsys.readouterr()
    assert run_cli(monkeypatch, "report", out) == 0
    text = capsys.readouterr().out
    assert "train seeds=[2]" in text and "test_accuracy" in text
    assert run_cli(monkeypatch, "report", tmp_path / "nothing") == 2
