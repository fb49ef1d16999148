import csv
import io
import json
import os
import subprocess
import sys
from pathlib import Path

import pytest

from uwb_dynroles.cli import main
from uwb_dynroles.sim import line_scenario, rectangle_scenario, records_from_csv
from uwb_dynroles.sim.metrics import roles_from_csv


@pytest.fixture
def scenario_file(tmp_path):
    p = tmp_path / "line.json"
    p.write_text(line_scenario(duration=5.0).dumps())
    return p


def run(*argv):
    return main([str(a) for a in argv])


def test_run_happy_path(tmp_path, scenario_file):
    out = tmp_path / "out"
    assert run("run", "--scenario", scenario_file, "--out", out, "--events") == 0
    assert sorted(p.name for p in out.iterdir()) == ["events.ndjson", "metrics.csv", "report.json", "roles.csv"]
    records = records_from_csv((out / "metrics.csv").read_text())
    assert records and {r.mode for r in records} == {"dynamic"}
    roles = roles_from_csv((out / "roles.csv").read_text())
    assert roles[0][0] == 0
    report = json.loads((out / "report.json").read_text())
    assert report["status"] == "ok" and report["seed"] == 0
    assert report["summary"]["dynamic"]["all"]["raw_error"]["count"] > 0
    assert report["update_rate_hz"]["cycle_frequency"] == pytest.approx(10.0)
    for line in (out / "events.ndjson").read_text().splitlines():
        assert set(json.loads(line)) == {"sim_time", "node", "kind", "outcome"}


def test_run_without_events_flag(tmp_path, scenario_file):
    out = tmp_path / "o"
    assert run("run", "--scenario", scenario_file, "--out", out) == 0
    assert not (out / "events.ndjson").exists()


def test_seed_override_is_deterministic(tmp_path, scenario_file):
    a, b = tmp_path / "a", tmp_path / "b"
    for d in (a, b):
        assert run("run", "--scenario", scenario_file, "--out", d, "--set", "seed=7") == 0
    assert (a / "metrics.csv").read_bytes() == (b / "metrics.csv").read_bytes()
    assert json.loads((a / "report.json").read_text())["seed"] == 7


def test_report_echo_reproduces_run(tmp_path, scenario_file):
    first = tmp_path / "first"
    assert run("run", "--scenario", scenario_file, "--out", first, "--set", "medium.ranging_noise_sigma=0.07") == 0
    echoed = tmp_path / "echo.json"
    echoed.write_text(json.dumps(json.loads((first / "report.json").read_text())["scenario"]))
    second = tmp_path / "second"
    assert run("run", "--scenario", echoed, "--out", second) == 0
    assert (first / "metrics.csv").read_bytes() == (second / "metrics.csv").read_bytes()


def test_malformed_json(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text('{\n  "schema_version": 1,\n  "nodes": [\n}')
    out = tmp_path / "never"
    assert run("run", "--scenario", bad, "--out", out) == 2
    assert not out.exists()
    err = capsys.readouterr().err
    assert "line 4" in err and "column" in err


def test_invalid_override_is_input_error(tmp_path, scenario_file):
    out = tmp_path / "never"
    assert run("run", "--scenario", scenario_file, "--out", out, "--set", "allocation.k=9") == 2
    assert not out.exists()


def test_collapse_exit_code(tmp_path, scenario_file, capsys):
    out = tmp_path / "c"
    code = run("run", "--scenario", scenario_file, "--out", out, "--set", "medium.loss_probability=0.95", "--events")
    assert code == 3
    report = json.loads((out / "report.json").read_text())
    assert report["status"] == "collapsed" and report["error"]
    assert (out / "metrics.csv").read_text().startswith("time,")
    assert "collapsed" in capsys.readouterr().err


def test_dump_costs(tmp_path, scenario_file):
    out = tmp_path / "d"
    assert run("run", "--scenario", scenario_file, "--out", out, "--dump-costs") == 0
    lines = (out / "costs.ndjson").read_text().splitlines()
    first = json.loads(lines[0])
    assert len(first["costs"]) == 15 and first["epoch"] == 0


@pytest.fixture(scope="module")
def rectangle_runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("rect")
    dirs = []
    for mode in ("tof_only", "tdoa_fixed", "dynamic"):
        f = root / f"{mode}.json"
        f.write_text(rectangle_scenario(mode, duration=25.0).dumps())
        d = root / mode
        assert main(["run", "--scenario", str(f), "--out", str(d)]) == 0
        dirs.append(d)
    return dirs


def _table(path):
    return list(csv.reader(io.StringIO(path.read_text())))


def test_compare_three_modes(tmp_path, rectangle_runs, capsys):
    assert run("compare", *rectangle_runs, "--segment", "all", "--out", tmp_path) == 0
    rows = _table(tmp_path / "compare.csv")
    assert rows[0] == ["metric", "statistic", "tof_only:tof_only", "tdoa_fixed:tdoa_fixed", "dynamic:dynamic"]
    medians = next(r for r in rows if r[:2] == ["raw_error", "median"])
    assert all(float(v) > 0 for v in medians[2:])
    assert "median" in capsys.readouterr().out


def test_compare_switch_segment(tmp_path, rectangle_runs):
    assert run("compare", *rectangle_runs, "--segment", "switch", "--out", tmp_path) == 0
    counts = next(r for r in _table(tmp_path / "compare.csv") if r[:2] == ["raw_error", "count"])
    # switch windows come from ground truth, so every mode covers the same samples
    assert len(set(counts[2:])) == 1 and int(counts[2]) > 0


def test_compare_identical_runs(tmp_path, rectangle_runs):
    d = rectangle_runs[2]
    assert run("compare", d, d, "--out", tmp_path) == 0
    for row in _table(tmp_path / "compare.csv")[1:]:
        assert row[2] == row[3]


def test_compare_missing_metrics(tmp_path, rectangle_runs, capsys):
    broken = tmp_path / "broken"
    broken.mkdir()
    (broken / "report.json").write_text((rectangle_runs[0] / "report.json").read_text())
    assert run("compare", rectangle_runs[0], broken, "--out", tmp_path) == 2
    err = capsys.readouterr().err
    assert "broken" in err and "metrics.csv" in err


def test_compare_geometry_mismatch(tmp_path, rectangle_runs, scenario_file, capsys):
    other = tmp_path / "line"
    assert run("run", "--scenario", scenario_file, "--out", other) == 0
    assert run("compare", rectangle_runs[0], other, "--out", tmp_path) == 2
    assert "geometry" in capsys.readouterr().err
    assert not (tmp_path / "compare.csv").exists()


def test_sweep_sigma(tmp_path):
    f = tmp_path / "s.json"
    f.write_text(line_scenario(duration=3.0).dumps())
    code = run("sweep", "--scenario", f, "--param", "medium.ranging_noise_sigma", "--values", "0.02,0.05,0.1",
               "--seeds", 10, "--jobs", 2, "--out", tmp_path)
    assert code == 0
    rows = list(csv.DictReader(io.StringIO((tmp_path / "sweep.csv").read_text())))
    assert [float(r["value"]) for r in rows] == [0.02, 0.05, 0.1]
    assert all(int(r["runs"]) == 10 for r in rows)
    med = [float(r["raw_median"]) for r in rows]
    assert med[0] < med[2]


def test_sweep_integer_parameter_is_reported(tmp_path):
    f = tmp_path / "s.json"
    f.write_text(line_scenario(duration=3.0).replace(**{"allocation.min_frequency": 6.0}).dumps())
    assert run("sweep", "--scenario", f, "--param", "allocation.k", "--values", "3,4,5", "--seeds", 1,
               "--jobs", 1, "--out", tmp_path) == 0
    rows = list(csv.DictReader(io.StringIO((tmp_path / "sweep.csv").read_text())))
    assert [r["value"] for r in rows] == ["3", "4", "5"]


@pytest.mark.parametrize("param, values, msg", [
    ("medium.ranging_noise_sigma", "", "empty"),
    ("medium.ranging_noise_sigma", " , ", "empty"),
    ("mode", "1,2", "not numeric"),
    ("protocol.double_sided", "0,1", "not numeric"),
    ("medium.nope", "1", "unknown"),
    ("medium.ranging_noise_sigma", "0.1,abc", "non-numeric"),
    ("medium.ranging_noise_sigma", "-1", "invalid"),
])
def test_sweep_refusals(tmp_path, scenario_file, capsys, param, values, msg):
    assert run("sweep", "--scenario", scenario_file, "--param", param, "--values", values, "--out", tmp_path) == 2
    assert msg in capsys.readouterr().err
    assert not (tmp_path / "sweep.csv").exists()


def test_module_entry_point_and_log_env(tmp_path, scenario_file):
    env = dict(os.environ, UWB_DYNROLES_LOG="info")
    proc = subprocess.run(
        [sys.executable, "-m", "uwb_dynroles", "run", "--scenario", str(scenario_file), "--out", str(tmp_path / "x")],
        capture_output=True, text=True, env=env, check=False,
    )
    assert proc.returncode == 0
    assert "INFO" in proc.stderr
    quiet = subprocess.run(
        [sys.executable, "-m", "uwb_dynroles", "run", "--scenario", str(scenario_file), "--out", str(tmp_path / "y")],
        capture_output=True, text=True, env=dict(os.environ, UWB_DYNROLES_LOG="error"), check=False,
    )
    assert quiet.returncode == 0 and quiet.stderr == ""


def test_no_temp_files_left(tmp_path, scenario_file):
    out = tmp_path / "t"
    run("run", "--scenario", scenario_file, "--out", out, "--events")
    assert not [p for p in out.iterdir() if p.name.startswith(".")]


def test_bundled_scenarios_parse():
    root = Path(__file__).resolve().parent.parent / "scenarios"
    files = sorted(root.glob("*.json"))
    assert len(files) == 6
    from uwb_dynroles.sim import load
    for f in files:
        assert load(f).dumps() == f.read_text()
