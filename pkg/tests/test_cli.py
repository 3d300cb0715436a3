import json
import subprocess
import sys

import pytest

from fedrul import bench
from fedrul.cli import main

SMALL = ["--clients", "3", "--test-engines", "1", "--flights", "6", "7", "--steps-per-flight", "100", "--epochs", "1", "--noise-clients", "1", "--batch-size", "32"]


def last_error(capsys):
    return json.loads(capsys.readouterr().err.strip().splitlines()[-1])


def test_gen_data_then_ingest(tmp_path, capsys):
    data = tmp_path / "engines.csv"
    assert main(["gen-data", "--engines", "2", "--flights", "3", "4", "--steps-per-flight", "60", "--out", str(data)]) == 0
    capsys.readouterr()
    assert main(["ingest", str(data), "--out", str(tmp_path / "copy.csv")]) == 0
    lines = [json.loads(line) for line in capsys.readouterr().out.splitlines()]
    assert [x["engine_id"] for x in lines] == ["E000", "E001"] and lines[0]["channels"] == 17
    assert (tmp_path / "copy.csv").read_bytes() == data.read_bytes()


def test_fl_writes_csv(tmp_path):
    out = tmp_path / "fl.csv"
    assert main(["fl", *SMALL, "--aggregation", "random-best", "--out", str(out)]) == 0
    rows = bench.read_csv_rows(out)
    assert rows[0]["method"] == "random-best" and rows[0]["status"] == "ok" and "rmse_E003" in rows[0]


def test_fl_on_csv_data(tmp_path):
    data = tmp_path / "engines.csv"
    main(["gen-data", "--engines", "4", "--flights", "5", "6", "--steps-per-flight", "80", "--out", str(data)])
    out = tmp_path / "fl.csv"
    assert main(["fl", *SMALL, "--data", str(data), "--out", str(out)]) == 0
    assert bench.read_csv_rows(out)[0]["scenario"] == "csv"


def test_ni_and_uc(tmp_path):
    assert main(["ni", *SMALL, "--out", str(tmp_path / "ni.csv")]) == 0
    assert [r["method"] for r in bench.read_csv_rows(tmp_path / "ni.csv")][-1] == "ni-mean"
    assert main(["uc", *SMALL, "--sequential"]) == 0


def test_sweep_with_selection_table(tmp_path):
    out, sel = tmp_path / "sweep.csv", tmp_path / "sel.csv"
    code = main(["sweep", *SMALL, "--alphas", "0,2", "--methods", "fedavg,full-best", "--out", str(out), "--selection-out", str(sel)])
    assert code == 0
    assert [(r["method"], r["alpha"]) for r in bench.read_csv_rows(out)] == [("fedavg", "0"), ("full-best", "0"), ("fedavg", "2"), ("full-best", "2")]
    assert len(bench.read_csv_rows(sel)) == 6


@pytest.mark.parametrize(
    "argv, kind",
    [
        (["fl", *SMALL, "--noise-alpha", "1", "--noise-clients", "0,1"], "ValueError"),
        (["ingest", "/nonexistent/file.csv"], "FileNotFoundError"),
        (["fl", *SMALL, "--connect", "127.0.0.1:1"], "ValueError"),
    ],
)
def test_failures_exit_nonzero_with_json_error(argv, kind, capsys):
    assert main(argv) == 1
    err = last_error(capsys)
    assert err["error"] == kind and err["message"]


def test_module_entry_point(tmp_path):
    proc = subprocess.run(
        [sys.executable, "-m", "fedrul", "ingest", str(tmp_path / "missing.csv")],
        capture_output=True,
        text=True,
    )
    assert proc.returncode == 1 and json.loads(proc.stderr.strip().splitlines()[-1])["error"] == "FileNotFoundError"
