import json
from importlib.resources import files

import pytest

from saev_resilience import model
from saev_resilience.cli import main

TINY = str(files("saev_resilience") / "data" / "tiny.toml")


@pytest.fixture
def line_toml(tmp_path):
    def write(body):
        path = tmp_path / "s.toml"
        path.write_text('[network]\ntravel_time = [[0, 1, 2], [1, 0, 1], [2, 1, 0]]\n' + body)
        return str(path)

    return write


def test_validate_tiny(tmp_path, capsys):
    assert main(["validate", "--scenario", TINY, "--out", str(tmp_path)]) == 0


def test_run_zero_demand(line_toml, tmp_path):
    sc = line_toml("[params]\nfleet_size = 1\nhorizon_T = 2\nhorizon_L = 3\n[fleet]\nplacement = [0]\n")
    assert main(["run", "--scenario", sc, "--out", str(tmp_path)]) == 0
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["total_waiting_min"] == 0
    assert (tmp_path / "trace.json").exists() and (tmp_path / "kpis.csv").exists()


def test_run_unreachable_outage_exits_infeasible(tmp_path, capsys):
    path = tmp_path / "u.toml"
    path.write_text(
        "[network]\ntravel_time = [[0, 5], [5, 0]]\n"
        "[params]\nfleet_size = 1\nhorizon_T = 3\nhorizon_L = 4\n"
        "[fleet]\nplacement = [0]\n"
        "[outage]\nq_demand = 0.009\nevents = [{node = 1, start = 0, end = 2}]\n"
    )
    assert main(["run", "--scenario", str(path), "--out", str(tmp_path / "o")]) == 2
    assert "step 0" in capsys.readouterr().err


def test_run_compare_writes_delta(tmp_path):
    assert main(["run", "--scenario", TINY, "--out", str(tmp_path), "--compare"]) == 0
    delta = json.loads((tmp_path / "delta.json").read_text())
    assert delta["q_v2b_kwh"] > 0
    assert (tmp_path / "normal_trace.json").exists()


@pytest.mark.parametrize("argv", [["run", "--bogus"], ["nosuch"], ["run"], ["sweep", "--axis", "fleet_size"]])
def test_usage_errors_exit_one(argv, capsys):
    assert main(argv) == 1


def test_unknown_override_key_exits_one(capsys):
    assert main(["validate", "--scenario", TINY, "--set", "params.nope=1"]) == 1
    assert "nope" in capsys.readouterr().err


def test_cost_with_reference_inputs(capsys):
    argv = ["cost"] + [f"--set={kv}" for kv in ("K=30", "C_v=45", "sigma=0.1292", "omega=0.0797", "B=85",
                                                  "theta_c=0.01", "T_relo=654", "q_v2b=139.74",
                                                  "generator_annual=13367")]
    assert main(argv) == 0
    out = capsys.readouterr().out
    assert "1350.00" in out and "29.19" in out and "71.82" in out and "118.96" in out


def test_cost_zero_frequency(tmp_path, capsys):
    argv = ["cost", "--out", str(tmp_path), "--set", "T_relo=654", "--set", "q_v2b=139.74", "--set", "f_out=0"]
    assert main(argv) == 0
    doc = json.loads((tmp_path / "cost.json").read_text())
    assert doc["costs"]["C_v2b"] == doc["costs"]["C_i"]


def test_cost_generator_dominates(capsys):
    argv = ["cost", "--set", "T_relo=654", "--set", "q_v2b=139.74", "--set", "generator_annual=1000"]
    assert main(argv) == 0
    assert "generator dominates" in capsys.readouterr().out


def test_cost_missing_inputs(capsys):
    assert main(["cost"]) == 1
    err = capsys.readouterr().err
    assert "T_relo" in err and "q_v2b" in err


def test_cost_from_run_directories(tmp_path, capsys):
    main(["run", "--scenario", TINY, "--out", str(tmp_path), "--compare"])
    normal = tmp_path / "normal"
    normal.mkdir()
    (normal / "trace.json").write_text((tmp_path / "normal_trace.json").read_text())
    assert main(["cost", "--normal", str(normal), "--emergency", str(tmp_path)]) == 0


def test_oracle_check_tiny(capsys):
    assert main(["oracle-check", "--scenario", TINY]) == 0
    assert capsys.readouterr().out.count("match") >= 6


def test_oracle_check_catches_mutated_constraint(capsys):
    model._MUTATIONS.add("flip_pickup_limit")
    try:
        assert main(["oracle-check", "--scenario", TINY]) == 3
    finally:
        model._MUTATIONS.discard("flip_pickup_limit")


def test_oracle_check_empty_horizon(capsys):
    assert main(["oracle-check", "--scenario", TINY, "--set", "params.horizon_L=0"]) == 0


def test_sweep_writes_reports(tmp_path, capsys):
    argv = ["sweep", "--scenario", TINY, "--out", str(tmp_path), "--axis", "outage_length", "--values", "1,2"]
    assert main(argv) == 0
    assert (tmp_path / "summary.csv").read_text().count("\n") == 3
    assert (tmp_path / "waiting_vs_outage_length.dat").exists()
