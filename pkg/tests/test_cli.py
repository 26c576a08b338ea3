import json

import pytest

from shflab.cli import main
from shflab.records import csv_body, csv_text, fmt, read_csv


def run(capsys, *argv):
    code = main(list(argv))
    return code, capsys.readouterr()


def test_gtheta_json(capsys):
    code, out = run(capsys, "gtheta", "--theta", "0", "--t", "0.5")
    doc = json.loads(out.out)
    assert code == 0
    assert doc["result"]["value"] == pytest.approx(0.91594020551279761, rel=1e-13)
    assert doc["result"]["error"] < 1e-8
    assert doc["seed"] == 0 and doc["config"]["command"] == "gtheta" and doc["build"]


def test_unknown_flag_exits_2(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["gtheta", "--bogus"])
    assert exc.value.code == 2
    assert "usage" in capsys.readouterr().err


def test_bad_value_exits_2(capsys):
    code, out = run(capsys, "gtheta", "--t", "2")
    assert code == 2 and "error" in out.err


def test_window_csv_header(capsys):
    code, out = run(capsys, "window", "--N", "1024", "--format", "csv", "--seed", "7")
    lines = out.out.splitlines()
    assert lines[0].startswith("# config: ") and lines[1].startswith("# build: ")
    assert lines[2] == "# seed: 7"
    assert lines[3].startswith("N,theta,R_N")


def test_kernel_rows(capsys):
    code, out = run(capsys, "kernel", "k2", "--r", "0.3", "1.0")
    rows = json.loads(out.out)["result"]
    assert [r["r"] for r in rows] == [0.3, 1.0]
    assert rows[0]["K2"] == pytest.approx(2.3734462823537, rel=1e-10)


def test_simulate_polymer_to_file(capsys, tmp_path):
    path = tmp_path / "p.csv"
    code, _ = run(capsys, "simulate", "polymer", "--N", "32", "--samples", "2048",
                  "--format", "csv", "--out", str(path))
    rows = read_csv(path)
    assert code == 0 and float(rows[0]["mean"]) > 1.0


def test_reproduce_single_criterion(capsys, tmp_path):
    code, out = run(capsys, "reproduce", "--only", "A2", "--out", str(tmp_path),
                    "--emit-plot-script")
    assert code == 0 and "closed_form_gap" in out.out
    assert (tmp_path / "A2_closed_form_gap.csv").exists()
    assert (tmp_path / "plot_results.py").exists()
    assert read_csv(tmp_path / "summary.csv")[0]["status"] == "pass"


def test_reproduce_rejects_unknown_criterion(capsys, tmp_path):
    code, out = run(capsys, "reproduce", "--only", "A99", "--out", str(tmp_path))
    assert code == 2


def test_quick_mode_skips_are_strict_failures(capsys, tmp_path):
    code, _ = run(capsys, "reproduce", "--only", "A3", "--quick", "--out", str(tmp_path))
    assert code == 0
    code, _ = run(capsys, "reproduce", "--only", "A3", "--quick", "--strict",
                  "--out", str(tmp_path))
    assert code == 1


def test_float_format_round_trips():
    x = 0.1 + 0.2
    assert float(fmt(x)) == x
    assert fmt(True) == "true" and fmt(None) == ""


def test_csv_body_drops_header():
    text = csv_text([{"a": 1.5, "b": "x,y"}], {"seed": 3})
    assert csv_body(text) == 'a,b\r\n1.5,"x,y"\r\n'
