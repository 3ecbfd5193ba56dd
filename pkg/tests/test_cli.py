import json
import subprocess
import sys

import numpy as np
import pytest

from distqn.cli import build_parser, cli_run
from distqn.dataio import load_dataset
from distqn.models import gen_example1


@pytest.fixture()
def data(tmp_path):
    path = tmp_path / "d.bin"
    assert cli_run(["gen", "--example", "1", "--n-total", "2000", "--p", "6", "--seed", "7", "--out", str(path)]) == 0
    return path


def test_gen_is_deterministic(tmp_path, data):
    other = tmp_path / "e.bin"
    cli_run(["gen", "--example", "1", "--n-total", "2000", "--p", "6", "--seed", "7", "--out", str(other)])
    assert data.read_bytes() == other.read_bytes()
    meta = json.loads((tmp_path / "d.bin.meta.json").read_text())
    assert meta["run_spec"]["seed"] == 7
    assert meta["theta_true"] == gen_example1(2000, 6, seed=7).theta_true.tolist()
    assert load_dataset(data).X.shape == (2000, 6)


def test_solve_trace(tmp_path, data):
    trace = tmp_path / "t.json"
    rc = cli_run(["solve", "--data", str(data), "--workers", "10", "--method", "bfgs", "--stages", "4",
                  "--trace", str(trace)])
    assert rc == 0
    doc = json.loads(trace.read_text())
    assert doc["ledger"]["summary"]["rounds"] == 12
    assert doc["run_spec"]["seed"] == 0 and doc["run_spec"]["method"] == "bfgs"
    assert len(doc["theta_by_stage"]) == 5


def test_same_argv_same_bytes(tmp_path, data):
    outs = []
    argv = ["solve", "--data", str(data), "--workers", "4", "--method", "sr1", "--stages", "3",
            "--trace", str(tmp_path / "t.json")]
    for _ in range(2):
        assert cli_run(argv) == 0
        outs.append((tmp_path / "t.json").read_bytes())
    assert outs[0] == outs[1]


def test_bench_table(tmp_path):
    argv = ["bench", "--example", "1", "--reps", "2", "--p", "4", "--n-total", "800", "--workers", "4",
            "--stages", "4", "--out-dir", str(tmp_path), "--name", "t1"]
    assert cli_run(argv) == 0
    header = (tmp_path / "t1_table.csv").read_text().splitlines()[0].split(",")
    assert len(header) == 2 + 2 * 5 + 1
    first = (tmp_path / "t1_full.json").read_bytes()
    assert cli_run(argv) == 0
    assert (tmp_path / "t1_full.json").read_bytes() == first
    spec = json.loads(first)["reports"][0]["spec"]
    assert spec["run_spec"]["reps"] == 2 and spec["base_seed"] == 0


def test_screen_with_dqn(tmp_path):
    out = tmp_path / "s.json"
    assert cli_run(["screen", "--p", "200", "--n-total", "2000", "--workers", "4", "--dqn-stages", "2",
                    "--out", str(out)]) == 0
    doc = json.loads(out.read_text())
    assert doc["coverage_rate"] == 1.0
    assert len(doc["dqn"]["theta_by_stage"]) == 3 and doc["dqn"]["rounds"] == 6


def test_config_file_with_flag_precedence(tmp_path, data):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"data": str(data), "workers": 5, "stages": 2, "method": "sr1"}))
    trace = tmp_path / "t.json"
    assert cli_run(["solve", "--config", str(cfg), "--stages", "3", "--trace", str(trace)]) == 0
    doc = json.loads(trace.read_text())
    assert doc["K"] == 3 and doc["M"] == 5 and doc["method"] == "sr1"


@pytest.mark.parametrize("argv", [
    ["solve", "--data", "missing.bin"],
    ["solve", "--bogus"],
    ["nope"],
    ["gen"],
])
def test_usage_errors(argv, capsys):
    assert cli_run(argv) == 1
    assert "error" in capsys.readouterr().err


def test_divisibility_error(data, capsys):
    assert cli_run(["solve", "--data", str(data), "--workers", "7"]) == 1
    assert "must divide" in capsys.readouterr().err


def test_bad_config_key(tmp_path, data):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"wrkers": 5}))
    assert cli_run(["solve", "--config", str(cfg), "--data", str(data)]) == 1


def test_runtime_failure(tmp_path, capsys):
    bad = tmp_path / "bad.bin"
    bad.write_bytes(b"garbage")
    assert cli_run(["solve", "--data", str(bad), "--workers", "1"]) == 2


def test_tcp_mode_gated(data, monkeypatch):
    monkeypatch.delenv("DQN_ENABLE_TCP", raising=False)
    assert cli_run(["master", "--data", str(data)]) == 1


def test_help_lists_defaults():
    sub = build_parser()._subparsers._group_actions[0].choices

    def help_text(name):
        return " ".join(sub[name].format_help().split())

    text = help_text("solve")
    for flag in ("--delta", "1e-08", "--max-iter", "500", "--c1", "--stages", "(default: 4)"):
        assert flag in text
    bench = help_text("bench")
    assert "(default: 100)" in bench
    gen = help_text("gen")
    assert "1.5 example 1" in gen and "0.3 example 2" in gen


def test_console_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "distqn.cli", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "solve" in proc.stdout
