import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from geoclose.cli import _close_enough, main
from geoclose.config import DEFAULTS, connect_endpoints, load_config, parse_config
from geoclose.errors import ConfigError
from geoclose.metric import make_metric

FLAT_RATIONAL = {
    "metric": {"family": "flat", "dim": 2},
    "close": {"seed_point": {"x": [0.2, 0.3], "v": [1.0, 1.0]}, "max_time": 3.0},
}


def write(tmp_path, cfg, name="cfg.json"):
    tmp_path.mkdir(parents=True, exist_ok=True)
    path = tmp_path / name
    path.write_text(json.dumps(cfg))
    return path


def run(tmp_path, command, cfg=None, *extra):
    argv = [command, "--out-dir", str(tmp_path / "out")]
    if cfg is not None:
        argv += ["--config", str(write(tmp_path, cfg))]
    code = main(argv + list(extra))
    report_path = tmp_path / "out" / "report.json"
    report = json.loads(report_path.read_text()) if report_path.exists() else None
    return code, report


# ----------------------------------------------------------------- config

def test_defaults_parse():
    cfg = load_config(None)
    assert set(cfg) == set(DEFAULTS)
    assert cfg["connect"]["tau"] == 1.0


@pytest.mark.parametrize("text, fragment", [
    ('{"conect": {}}', "unknown sections: conect"),
    ('{"connect": {"rhoo": 0.1}}', "unknown keys in section 'connect': rhoo"),
    ('{"connect": {"tau": -1}}', "connect.tau must be positive"),
    ('{"close": {"max_tme": 3}}', "section 'close'"),
    ('{"metric": {"family": "nope"}}', "section 'metric'"),
    ('{"obstacle": {"arcs": [{"point": [0, 0], "angle": 1, "colour": 2}]}}', "obstacle arc: colour"),
    ('[1, 2]', "top level must be an object"),
])
def test_config_errors_name_the_problem(text, fragment):
    with pytest.raises(ConfigError, match=fragment):
        parse_config(text, "cfg.json")


def test_bad_json_reports_line():
    with pytest.raises(ConfigError, match=r"cfg.json: line 3"):
        parse_config('{\n  "flow": {},\n  "connect": {,}\n}', "cfg.json")


def test_connect_endpoints_from_displacement():
    cfg = load_config(None)
    metric = make_metric(cfg["metric"])
    start, target = connect_endpoints(metric, cfg["connect"], separation=1e-3)
    d = np.concatenate([start.x - target.x, start.v - target.v])
    assert np.linalg.norm(d) == pytest.approx(1e-3, rel=0.05)


# -------------------------------------------------------------------- cli

def test_missing_config_file_exit_code_2(tmp_path, capsys):
    code = main(["integrate", "--out-dir", str(tmp_path), "--config", str(tmp_path / "none.json")])
    assert code == 2
    assert "config error" in capsys.readouterr().err


def test_unknown_key_exit_code_2(tmp_path, capsys):
    code, report = run(tmp_path, "integrate", {"flow": {"durration": 1.0}})
    assert code == 2 and report is None
    assert "durration" in capsys.readouterr().err


def test_integrate_writes_report_and_trajectory(tmp_path):
    code, report = run(tmp_path, "integrate", {"flow": {"duration": 2.0, "samples": 21}}, "--emit-trajectories")
    assert code == 0
    assert report["verified"] and report["energy_drift"] < 1e-9
    rows = list(csv.reader(open(tmp_path / "out" / "trajectory.csv")))
    assert len(rows) == 22


def test_failed_check_exit_code_1(tmp_path):
    # an endpoint tolerance below what any integration reaches makes the declared check fail
    code, report = run(tmp_path, "connect", {"connect": {"endpoint_tol": 1e-30}})
    assert code == 1
    assert report["verified"] is False
    assert report["endpoint_residual"] > 0


def test_stage_error_is_reported_with_exit_code_1(tmp_path):
    cfg = {"metric": {"family": "flat", "dim": 2},
           "close": {"seed_point": {"x": [0.2, 0.3], "v": [1.0, 0.618]}, "max_time": 2.0,
                     "recurrence_gap": 1e-9}}
    code, report = run(tmp_path, "close", cfg)
    assert code == 1
    assert "recurrence" in report["error"]


def test_connect_identical_endpoints(tmp_path):
    end = {"x": [0.3, 0.4], "v": [1.0, 0.0]}
    code, report = run(tmp_path, "connect", {"connect": {"start": end, "target": end}})
    assert code == 0
    assert report["f_c1_norm"] == 0.0 and report["endpoint_residual"] == 0.0


def test_connect_is_deterministic(tmp_path):
    code_a, a = run(tmp_path / "a", "connect", {"connect": {"separation": 5e-3}})
    code_b, b = run(tmp_path / "b", "connect", {"connect": {"separation": 5e-3}})
    assert code_a == code_b == 0
    a.pop("timing"), b.pop("timing")
    assert a == b


def test_verify_round_trip(tmp_path):
    code, _ = run(tmp_path, "connect", {"connect": {"separation": 5e-3}})
    assert code == 0
    assert main(["verify", "--out-dir", str(tmp_path / "out")]) == 0
    result = json.loads((tmp_path / "out" / "verify.json").read_text())
    assert result["verified"] and result["mismatches"] == []


def test_verify_detects_tampering(tmp_path):
    code, report = run(tmp_path, "connect", {"connect": {"separation": 5e-3}})
    report["f_c1_norm"] *= 1.01
    (tmp_path / "out" / "report.json").write_text(json.dumps(report))
    assert main(["verify", "--out-dir", str(tmp_path / "out")]) == 1
    result = json.loads((tmp_path / "out" / "verify.json").read_text())
    assert result["mismatches"] == ["/f_c1_norm"]


def test_verify_without_report_is_config_error(tmp_path):
    assert main(["verify", "--out-dir", str(tmp_path)]) == 2


def test_report_comparison_tolerance():
    assert _close_enough({"a": 1.0, "b": [1, 2]}, {"a": 1.0 + 1e-9, "b": [1, 2]}) == []
    assert _close_enough({"a": 1.0}, {"a": 1.001}) == ["/a"]
    assert sorted(_close_enough({"a": 1.0}, {"c": 1.0})) == ["/a", "/c"]


def test_sweep_monotone(tmp_path):
    cfg = {"sweep": {"separations": [1e-2, 5e-3]}}
    code, report = run(tmp_path, "sweep", cfg)
    assert report["monotone_f_c1_norm"]
    rows = list(csv.DictReader(open(tmp_path / "out" / "sweep.csv")))
    assert [float(r["separation"]) for r in rows] == pytest.approx([1e-2, 5e-3], rel=0.05)
    assert code == (0 if report["verified"] else 1)


def test_close_flat_rational_slope(tmp_path):
    code, report = run(tmp_path, "close", FLAT_RATIONAL, "--emit-trajectories")
    assert code == 0
    assert report["closed"] and report["f_c1_norm"] == 0.0
    assert report["period"] == pytest.approx(np.sqrt(2), abs=1e-9)
    rows = list(csv.reader(open(tmp_path / "out" / "closed_orbit.csv")))
    first, last = np.array(rows[1][1:3], float), np.array(rows[-1][1:3], float)
    np.testing.assert_allclose(np.mod(last, 1.0), np.mod(first, 1.0), atol=1e-9)


def test_console_module_runs(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "geoclose.cli", "integrate", "--out-dir", str(tmp_path),
                           "--config", str(write(tmp_path, {"flow": {"duration": 1.0}}))],
                          capture_output=True, text=True)
    assert proc.returncode == 0
    assert json.loads(proc.stdout)["verified"] is True
