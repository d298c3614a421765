import csv
import json

import numpy as np
import pytest

from turnpike_mhe.cli import main
from turnpike_mhe.io import scenario_to_dict
from turnpike_mhe.system_model import DisturbanceLaw, batch_reactor_scenario


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def run(tmp_path, *args):
    return main([*args, "--out", str(tmp_path)])


@pytest.mark.parametrize("scale,expected", [(1.0, 401), (0.25, 101)])
def test_simulate_reactor_rows(tmp_path, scale, expected):
    assert run(tmp_path, "simulate", "--scenario", "batch_reactor", "--scale", str(scale)) == 0
    data = rows(tmp_path / "data.csv")
    assert len(data) == expected
    assert list(data[0]) == ["t", "u_0", "u_1", "y_0"]
    assert len(rows(tmp_path / "truth.csv")) == expected
    manifest = json.loads((tmp_path / "manifest_simulate.json").read_text())
    assert manifest["outputs"] == ["data.csv", "truth.csv", "scenario.json"]


def test_simulate_motivating(tmp_path):
    assert run(tmp_path, "simulate") == 0
    assert len(rows(tmp_path / "data.csv")) == 71


def test_zero_length_record(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"scenario": "motivating", "T": 0}))
    assert run(tmp_path, "simulate", "--config", str(cfg)) == 0
    assert len(rows(tmp_path / "data.csv")) == 1


def test_global_flags_after_command(tmp_path):
    assert main(["simulate", "--scenario", "batch_reactor", "--scale", "0.1", "--out", str(tmp_path)]) == 0
    assert len(rows(tmp_path / "data.csv")) == 41


def test_deterministic_outputs(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for d in (a, b):
        assert run(d, "approx", "--scenario", "batch_reactor", "--scale", "0.1", "--N", "10") == 0
    assert (a / "ae_N10.csv").read_bytes() == (b / "ae_N10.csv").read_bytes()


def test_unknown_scenario(tmp_path):
    assert run(tmp_path, "simulate", "--scenario", "nope") == 2


def test_bad_config_keys(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"horizon": 5}))
    assert run(tmp_path, "simulate", "--config", str(cfg)) == 2


def test_odd_horizon_is_config_error(tmp_path):
    assert run(tmp_path, "approx", "--N", "5") == 2


def test_solver_failure_exit_code(tmp_path):
    assert run(tmp_path, "solve-fie", "--scenario", "batch_reactor", "--scale", "0.1", "--max-iter", "1") == 3


def test_unwritable_output(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("")
    assert main(["simulate", "--out", str(blocker / "sub")]) == 4


def test_solve_window_pins(tmp_path):
    assert run(tmp_path, "solve-window", "--tau", "10", "--N", "6", "--pin-init", "0", "--pin-term", "30") == 0
    r = rows(tmp_path / "window_tau10_N6.csv")
    assert float(r[0]["x_0"]) == 0.0 and float(r[-1]["x_0"]) == 30.0
    assert run(tmp_path, "solve-window", "--tau", "10", "--N", "6", "--pin-init", "0,1") == 2


def test_compare_full_horizon_window(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"scenario": "motivating", "horizons": [70]}))
    assert run(tmp_path, "compare", "--config", str(cfg)) == 0
    (row,) = rows(tmp_path / "summary.csv")
    assert list(row) == ["N", "J_ae", "J_mhe", "V_T", "gap_ae", "gap_mhe", "sne_fie", "sne_ae", "sne_mhe",
                         "bound", "status"]
    assert abs(float(row["gap_ae"])) <= 1e-8
    assert row["status"] == "ok"


def test_compare_zero_noise_scenario(tmp_path):
    sc = batch_reactor_scenario(30)
    law = DisturbanceLaw("constant", w_value=np.zeros(2), v_value=np.zeros(1))
    d = scenario_to_dict(type(sc)(sc.model, sc.sets, sc.x0, sc.T, law, sc.inputs, sc.seed))
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"scenario": d, "horizons": [6, 10]}))
    assert run(tmp_path, "compare", "--config", str(cfg)) == 0
    for row in rows(tmp_path / "summary.csv"):
        for key in ("J_ae", "J_mhe", "V_T"):
            assert float(row[key]) <= 1e-10
        for key in ("sne_fie", "sne_ae", "sne_mhe"):
            assert float(row[key]) <= 1e-10


def test_default_scan(tmp_path):
    assert run(tmp_path, "turnpike-scan") == 0
    env = json.loads((tmp_path / "envelope.json").read_text())
    assert len(env["midpoint_gaps"]) == 20 and env["failures"] == []
    assert 0 < env["fits"]["piecewise"]["rho"] < 1
    assert len(rows(tmp_path / "profiles.csv")) == sum(N + 1 for N in (5, 10, 15, 20)) * 5


def test_probe_and_perf_report(tmp_path):
    assert run(tmp_path, "sensitivity-probe", "--N", "20", "--tau", "20") == 0
    d = [float(r["difference"]) for r in rows(tmp_path / "probe.csv")]
    assert d[0] >= 1.0 and d[-1] <= 1e-6
    assert run(tmp_path, "mhe", "--N", "10") == 0
    assert run(tmp_path, "perf-report", "--estimate", str(tmp_path / "mhe_N10.csv")) == 0
    assert run(tmp_path, "approx", "--N", "10") == 0
    assert run(tmp_path, "perf-report", "--estimate", str(tmp_path / "ae_N10.csv")) == 0
    rep = json.loads((tmp_path / "perf_report.json").read_text())
    assert rep["gap"] >= -1e-8
