import csv
import json
import subprocess
import sys
import threading
import time
from pathlib import Path

import numpy as np
import pytest

from fedes import cli
from fedes.data import write_idx
from fedes.exp import read_params


@pytest.fixture
def tiny_config(tmp_path):
    rng = np.random.default_rng(0)
    d = tmp_path / "data"
    d.mkdir()
    write_idx(d / "train-images.gz", rng.integers(0, 256, (96, 4, 4), dtype=np.uint8), compress=True)
    write_idx(d / "train-labels.gz", np.tile(np.arange(3, dtype=np.uint8), 32), compress=True)
    write_idx(d / "test-images", rng.integers(0, 256, (30, 4, 4), dtype=np.uint8))
    write_idx(d / "test-labels", np.tile(np.arange(3, dtype=np.uint8), 10))
    cfg = {
        "widths": [16, 8, 3],
        "clients": 2,
        "n_b": 16,
        "rounds": 3,
        "eval_every": 1,
        "alpha": 0.05,
        "train_images": "data/train-images.gz",
        "train_labels": "data/train-labels.gz",
        "test_images": "data/test-images",
        "test_labels": "data/test-labels",
        "out": str(tmp_path / "out"),
    }
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg))
    return path


def test_run_happy_path(tiny_config, tmp_path, capsys):
    assert cli.main(["run", "--config", str(tiny_config)]) == 0
    out = tmp_path / "out"
    with open(out / "metrics.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 3
    assert read_params(out / "params.bin").shape == (16 * 8 + 8 + 8 * 3 + 3,)
    err = capsys.readouterr().err
    assert json.loads(err.splitlines()[0])["rounds"] == 3


def test_overrides_take_precedence(tiny_config, tmp_path, capsys):
    other = tmp_path / "other"
    code = cli.main(["run", "--config", str(tiny_config), "--rounds", "1", "--beta", "0.5",
                     "--n-b", "8", "--sigma", "0.02", "--seed", "ab" * 32, "--out", str(other)])
    assert code == 0
    echoed = json.loads(capsys.readouterr().err.splitlines()[0])
    assert (echoed["rounds"], echoed["beta"], echoed["n_b"], echoed["sigma"]) == (1, 0.5, 8, 0.02)
    assert echoed["common_seed"] == "ab" * 32
    assert (other / "metrics.csv").exists()


def test_missing_config_is_usage_error(capsys):
    assert cli.main(["run", "--config", "missing.json"]) == 1
    assert "missing.json" in capsys.readouterr().err


def test_unknown_flag_is_usage_error(tiny_config, capsys):
    assert cli.main(["run", "--config", str(tiny_config), "--bogus", "1"]) == 1
    assert "usage" in capsys.readouterr().err


def test_no_subcommand_is_usage_error():
    assert cli.main([]) == 1


def test_invalid_value_is_usage_error(tiny_config):
    assert cli.main(["run", "--config", str(tiny_config), "--beta", "1.5"]) == 1
    assert cli.main(["run", "--config", str(tiny_config), "--seed", "12"]) == 1


def test_corrupt_data_is_runtime_error(tiny_config, tmp_path):
    (tmp_path / "data" / "test-labels").write_bytes(b"\x00\x00\x08\x01")
    assert cli.main(["run", "--config", str(tiny_config)]) == 2


def test_partition_inspect(tiny_config, capsys):
    assert cli.main(["partition-inspect", "--config", str(tiny_config), "--mode", "noniid"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0].split()[0] == "client"
    assert len(lines) == 3
    assert sum(int(line.split()[-1]) for line in lines[1:]) == 96


def test_golden_emit_then_check(tmp_path, capsys):
    assert cli.main(["golden", "emit", "--dir", str(tmp_path)]) == 0
    assert cli.main(["golden", "check", "--dir", str(tmp_path)]) == 0
    (tmp_path / "derive_seed.hex").write_text("00\n")
    assert cli.main(["golden", "check", "--dir", str(tmp_path)]) == 2


def test_repo_golden_fixtures_hold():
    assert cli.main(["golden", "check", "--dir", str(Path(__file__).parent / "golden")]) == 0


def test_serve_and_client_processes(tiny_config, tmp_path):
    """Separate server and client processes reproduce the in-process run."""
    assert cli.main(["run", "--config", str(tiny_config), "--out", str(tmp_path / "ref")]) == 0
    server = subprocess.Popen(
        [sys.executable, "-m", "fedes", "serve", "--config", str(tiny_config), "--listen", "127.0.0.1:0",
         "--out", str(tmp_path / "tcp")],
        stderr=subprocess.PIPE, stdout=subprocess.PIPE, text=True)
    address = None
    deadline = time.monotonic() + 30
    while address is None and time.monotonic() < deadline:
        line = server.stderr.readline()
        if line.startswith("listening on "):
            address = line.split()[-1]
    assert address, "server never announced its address"
    threading.Thread(target=server.stderr.read, daemon=True).start()
    procs = [subprocess.Popen([sys.executable, "-m", "fedes", "client", "--config", str(tiny_config),
                               "--k", str(k), "--connect", address],
                              stdout=subprocess.PIPE, stderr=subprocess.PIPE, text=True) for k in range(2)]
    for p in procs:
        out, err = p.communicate(timeout=60)
        assert p.returncode == 0, err
        assert "served 3 rounds" in out
    server.wait(timeout=60)
    assert server.returncode == 0
    assert (tmp_path / "tcp" / "params.bin").read_bytes() == (tmp_path / "ref" / "params.bin").read_bytes()
