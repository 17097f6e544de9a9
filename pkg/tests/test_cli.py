import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from dvi_ibll.cli import RunConfig, main

TINY = {
    "data": {"synthetic": {"kind": "linear", "n": 120, "n_features": 3}},
    "model": {"feature_dims": [8], "generator_hidden": [8], "score_hidden": [8]},
    "schedule": {"n_steps": 10},
    "train": {"epochs": 3, "eval_paths": 16},
    "eval_samples": 32,
}

SMALL_ORACLE = {
    "oracle": {"n": 60, "n_features": 4, "feature_scale": 0.15, "train_steps": 300, "score_hidden": [16],
               "n_steps": 50, "eval_paths": 2048}
}


def write_config(tmp_path, cfg, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(cfg))
    return str(p)


def last_error(capsys):
    return json.loads(capsys.readouterr().err.strip().splitlines()[-1])


def read_log(path):
    with open(path) as f:
        return [{k: v for k, v in row.items() if k != "wall_seconds"} for row in csv.DictReader(f)]


class TestConfigErrors:
    def test_missing_config(self, tmp_path, capsys):
        path = tmp_path / "nope.json"
        assert main(["train", "--config", str(path)]) == 2
        err = last_error(capsys)
        assert err["exit_code"] == 2
        assert str(path) in err["message"]

    def test_unknown_key(self, tmp_path, capsys):
        cfg = write_config(tmp_path, {"train": {"epochz": 3}})
        assert main(["train", "--config", cfg]) == 2
        assert "train.epochz" in last_error(capsys)["message"]

    def test_bad_json(self, tmp_path, capsys):
        p = tmp_path / "bad.json"
        p.write_text("{\n  'a': 1}")
        assert main(["train", "--config", str(p)]) == 2
        assert "line 2" in last_error(capsys)["message"]

    def test_two_data_sources(self, tmp_path, capsys):
        cfg = write_config(tmp_path, {"data": {"builtin": "boston", "csv": "x.csv"}})
        assert main(["train", "--config", cfg]) == 2
        assert "exactly one" in last_error(capsys)["message"]

    def test_bad_seeds(self, tmp_path, capsys):
        cfg = write_config(tmp_path, TINY)
        assert main(["train", "--config", cfg, "--seeds", "1,x"]) == 2

    def test_defaults(self):
        cfg = RunConfig()
        assert cfg.data.builtin == "boston"
        assert cfg.schedule.n_steps == 100

    def test_missing_csv_is_data_error(self, tmp_path, capsys):
        cfg = write_config(tmp_path, {"data": {"csv": str(tmp_path / "gone.csv")}})
        assert main(["train", "--config", cfg]) == 3

    def test_malformed_csv_reports_line(self, tmp_path, capsys):
        data = tmp_path / "d.csv"
        data.write_text("a,y\n1,2\n1,oops\n")
        cfg = write_config(tmp_path, {"data": {"csv": str(data)}})
        assert main(["train", "--config", cfg]) == 3
        assert "d.csv:3" in last_error(capsys)["message"]


def test_train_eval_sample_round_trip(tmp_path, capsys):
    cfg = write_config(tmp_path, TINY)
    out = tmp_path / "run"
    assert main(["train", "--config", cfg, "--out", str(out), "--seeds", "2"]) == 0
    seed_dir = out / "seed_2"
    metrics = json.loads((seed_dir / "metrics.json").read_text())
    names = {m["metric"] for m in metrics}
    assert {"nll", "rmse", "baseline_nll", "baseline_rmse"} <= names
    log = read_log(seed_dir / "epoch_log.csv")
    assert [r["epoch"] for r in log] == ["1", "2", "3"]

    assert main(["eval", "--config", cfg, "--checkpoint", str(seed_dir / "model.bin")]) == 0
    evaluated = {m["metric"]: m["value"] for m in json.loads((seed_dir / "eval_metrics.json").read_text())}
    trained = {m["metric"]: m["value"] for m in metrics}
    assert evaluated["nll"] == pytest.approx(trained["nll"], rel=1e-12)

    assert main(["sample", "--checkpoint", str(seed_dir / "model.bin"), "--n", "50"]) == 0
    with open(seed_dir / "weights.csv") as f:
        rows = list(csv.reader(f))
    assert rows[0] == [f"beta_{i}_0" for i in range(8)]
    assert len(rows) == 51
    assert np.all(np.isfinite(np.array(rows[1:], dtype=float)))


def test_outputs_idempotent(tmp_path):
    cfg = write_config(tmp_path, TINY)
    for name in ("a", "b"):
        assert main(["train", "--config", cfg, "--out", str(tmp_path / name)]) == 0
    a, b = tmp_path / "a" / "seed_0", tmp_path / "b" / "seed_0"
    assert (a / "metrics.json").read_text() == (b / "metrics.json").read_text()
    assert read_log(a / "epoch_log.csv") == read_log(b / "epoch_log.csv")
    assert (a / "model.bin").read_bytes() == (b / "model.bin").read_bytes()


def test_eval_rejects_wrong_width(tmp_path, capsys):
    cfg = write_config(tmp_path, TINY)
    assert main(["train", "--config", cfg, "--out", str(tmp_path)]) == 0
    data = tmp_path / "wide.csv"
    data.write_text("a,b,y\n1,2,3\n4,5,6\n")
    code = main(["eval", "--config", cfg, "--checkpoint", str(tmp_path / "seed_0" / "model.bin"), "--data", str(data)])
    assert code == 3
    assert "expects 3" in last_error(capsys)["message"]


def test_benchmark_table(tmp_path, capsys):
    cfg = write_config(tmp_path, TINY)
    assert main(["benchmark", "--config", cfg, "--out", str(tmp_path), "--seeds", "0,1"]) == 0
    table = (tmp_path / "benchmark.txt").read_text().splitlines()
    assert table[0] == "dataset: linear (2 seeds)"
    assert table[1].split() == ["method", "NLL", "RMSE"]
    assert table[2].startswith("DVI-IBLL")
    assert table[2].count("±") == 2
    assert table[3].startswith("MAP + conjugate BLL")
    summary = json.loads((tmp_path / "benchmark.json").read_text())
    assert len(summary["per_seed"]["nll"]) == 2


def test_oracle_check(tmp_path, capsys):
    cfg = write_config(tmp_path, SMALL_ORACLE)
    code = main(["oracle-check", "--config", cfg, "--out", str(tmp_path)])
    lines = capsys.readouterr().out.strip().splitlines()
    assert len(lines) == 6
    assert all(line.split()[0] in ("PASS", "FAIL") for line in lines)
    records = json.loads((tmp_path / "oracle_check.json").read_text())
    assert [r["passed"] for r in records] == [line.startswith("PASS") for line in lines]
    assert code == (0 if all(r["passed"] for r in records) else 5)
    by_name = {r["name"]: r for r in records}
    assert by_name["kappa_closed_form"]["passed"]
    assert by_name["reference_score_l1_zero"]["passed"]


def test_console_script_help():
    res = subprocess.run([sys.executable, "-m", "dvi_ibll.cli", "--help"], capture_output=True, text=True)
    assert res.returncode == 0
    assert "oracle-check" in res.stdout


def test_unknown_command_exits_2():
    res = subprocess.run([sys.executable, "-m", "dvi_ibll.cli", "fit"], capture_output=True, text=True)
    assert res.returncode == 2
