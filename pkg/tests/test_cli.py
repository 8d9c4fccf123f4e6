from __future__ import annotations

import subprocess
import sys

import numpy as np
import pytest

from mpctensor.cli import ROLES, main
from mpctensor.data import WeightsContainer, load_idx


def run_cli(*args):
    return subprocess.Popen([sys.executable, "-m", "mpctensor", *args], stdout=subprocess.PIPE,
                            stderr=subprocess.PIPE, text=True)


@pytest.fixture(scope="module")
def fixtures(tmp_path_factory):
    d = tmp_path_factory.mktemp("fx")
    assert main(["make-fixtures", str(d), "--train", "500", "--test", "50"]) == 0
    assert main(["train-logreg", "--images", str(d / "train-images-idx3-ubyte"),
                 "--labels", str(d / "train-labels-idx1-ubyte"), "--epochs", "3", "--out", str(d / "w.bin")]) == 0
    return d


def test_train_logreg_writes_container(fixtures):
    w = WeightsContainer.load(fixtures / "w.bin")
    assert w["fc/w"].shape == (784, 10)


def test_five_processes_over_tcp(fixtures, tmp_path):
    cfg = tmp_path / "session.cfg"
    assert main(["make-config", "--out", str(cfg), "--network", "logreg", "--batch", "3", "--seed", "9"]) == 0
    procs = {}
    for role in ROLES:
        extra = []
        if role == "owner":
            extra = ["--weights", str(fixtures / "w.bin")]
        if role == "client":
            extra = ["--images", str(fixtures / "test-images-idx3-ubyte"), "--stats-out", str(tmp_path / "s.csv")]
        procs[role] = run_cli("party", "--role", role, "--config", str(cfg), *extra)
    outs = {role: p.communicate(timeout=120) for role, p in procs.items()}
    for role, p in procs.items():
        assert p.returncode == 0, (role, outs[role][1])
    lines = [line for line in outs["client"][0].splitlines() if line.startswith("sample")]
    preds = [int(line.split()[3]) for line in lines]
    labels = load_idx(fixtures / "test-labels-idx1-ubyte")[:3]
    assert len(preds) == 3
    assert np.mean(np.array(preds) == labels) >= 2 / 3
    assert (tmp_path / "s.csv").read_text().startswith("phase,sender")


def test_bad_config_exits_2(tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("backend = int128\n")
    assert main(["party", "--role", "client", "--config", str(cfg)]) == 2
    assert "config error" in capsys.readouterr().err


def test_missing_file_exits_1(tmp_path):
    assert main(["predict", "--images", str(tmp_path / "nope")]) == 1


def test_predict_inmemory(fixtures, tmp_path, capsys):
    stats = tmp_path / "stats.csv"
    code = main(["predict", "--network", "logreg", "--weights", str(fixtures / "w.bin"), "--batch", "4",
                 "--images", str(fixtures / "test-images-idx3-ubyte"),
                 "--labels", str(fixtures / "test-labels-idx1-ubyte"), "--seed", "1", "--stats-out", str(stats)])
    out = capsys.readouterr().out
    assert code == 0 and out.count("sample ") == 4 and "accuracy" in out
    assert "online" in stats.read_text()


def test_plan_stats_and_poly(capsys):
    assert main(["plan-stats", "--network", "B", "--backend", "int100"]) == 0
    assert main(["poly", "--degree", "4"]) == 0
    out = capsys.readouterr().out
    assert "nodes" in out and "max error" in out


def test_bench_command(tmp_path, capsys):
    csv = tmp_path / "b.csv"
    assert main(["bench", "--network", "logreg", "--batch", "1", "--runs", "1", "--samples", "10",
                 "--csv-out", str(csv)]) == 0
    assert "KL(" in capsys.readouterr().out and csv.read_text().startswith("kind")


def test_local_on_int100_is_usage_error(tmp_path):
    assert main(["make-config", "--out", str(tmp_path / "c"), "--backend", "int100", "--trunc", "local"]) == 2
