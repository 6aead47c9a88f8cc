import highspy
import numpy as np
import pytest

from saev_resilience.model import FleetState, MilpInstance, assemble
from saev_resilience.oracle import oracle_solve
from saev_resilience.scenario import ModelParams, Network, OutageEvent, OutageSchedule
from saev_resilience.solver import (
    SolveOptions,
    SolverUnavailable,
    export_standard_form,
    read_standard_form,
    solve,
)

TWO = Network.from_travel_times([[0, 1], [1, 0]])


def amod_instance(T=3):
    st = FleetState.parked([1], 2, 0.8)
    P = np.zeros((2, 2, T))
    P[0, 1, 1] = 1
    return assemble(st, P, np.zeros((2, T), dtype=int), ModelParams(fleet_size=1, horizon_T=T),
                    OutageSchedule(), TWO)


def toy():
    # min -x - 2y  s.t.  x + y <= 1.5,  x - y >= -1,  x binary, 0 <= y <= 1
    return MilpInstance.from_dense(c=[-1, -2], A=[[1, 1], [1, -1]], row_lb=[-np.inf, -1], row_ub=[1.5, np.inf],
                                   lb=[0, 0], ub=[1, 1], integer=[True, False])


def test_empty_instance_is_optimal_at_zero():
    sol = solve(MilpInstance.from_dense(c=[]))
    assert sol.status == "optimal" and sol.objective == 0


def test_single_binary():
    sol = solve(MilpInstance.from_dense(c=[-1.0], lb=[0], ub=[1], integer=[True]))
    assert sol.objective == pytest.approx(-1.0) and sol.values[0] == pytest.approx(1.0)


def test_tiny_fleet_instance_matches_oracle():
    inst = amod_instance()
    assert solve(inst).objective == pytest.approx(oracle_solve(inst).objective, abs=1e-9)


def test_infeasible_is_a_status_not_an_exception():
    inst = MilpInstance.from_dense(c=[1.0], A=[[1.0]], row_lb=[2.0], row_ub=[np.inf], lb=[0], ub=[1],
                                   integer=[True])
    assert solve(inst).status == "infeasible"


def test_unknown_backend_points_to_export(monkeypatch):
    monkeypatch.setenv("SAEV_SOLVER", "nosuch")
    with pytest.raises(SolverUnavailable, match="export_standard_form"):
        solve(toy())


def test_scipy_backend_agrees():
    inst = amod_instance()
    a = solve(inst, backend="highs")
    b = solve(inst, backend="scipy")
    assert a.objective == pytest.approx(b.objective, abs=1e-6)


def test_optimal_status_respects_gap():
    opts = SolveOptions(rel_gap=1e-4)
    sol = solve(amod_instance(4), opts)
    assert sol.status == "optimal"
    assert abs(sol.objective - sol.bound) / max(1.0, abs(sol.objective)) <= opts.rel_gap


@pytest.mark.parametrize("bad", [{"rel_gap": -1.0}, {"time_limit_s": 0.0}])
def test_solve_options_validated(bad):
    with pytest.raises(ValueError):
        SolveOptions(**bad)


class TestExport:
    def test_toy_parses_under_independent_reader(self, tmp_path):
        path = tmp_path / "toy.mps"
        export_standard_form(toy(), path)
        h = highspy.Highs()
        h.setOptionValue("output_flag", False)
        assert h.readModel(str(path)) == highspy.HighsStatus.kOk
        h.run()
        assert h.getInfo().objective_function_value == pytest.approx(solve(toy()).objective)

    def test_export_is_byte_identical(self, tmp_path):
        inst = amod_instance()
        export_standard_form(inst, tmp_path / "a.mps")
        export_standard_form(amod_instance(), tmp_path / "b.mps")
        assert (tmp_path / "a.mps").read_bytes() == (tmp_path / "b.mps").read_bytes()

    def test_zero_coefficients_omitted(self, tmp_path):
        inst = MilpInstance.from_dense(c=[1.0, 0.0], A=[[1.0, 0.0]], row_lb=[0.0], row_ub=[1.0])
        export_standard_form(inst, tmp_path / "z.mps")
        body = (tmp_path / "z.mps").read_text()
        assert " 0\n" not in body.split("COLUMNS")[1].split("RHS")[0].replace(" OBJ 0\n", "")

    def test_round_trip_reproduces_matrices(self, tmp_path):
        inst = amod_instance()
        export_standard_form(inst, tmp_path / "r.mps")
        back = read_standard_form(tmp_path / "r.mps")
        assert back.n_cols == inst.n_cols and back.n_rows == inst.n_rows
        assert (back.A != inst.A).nnz == 0
        assert np.array_equal(back.c, inst.c)
        assert np.array_equal(back.lb, inst.lb) and np.array_equal(back.ub, inst.ub)
        assert np.array_equal(back.row_lb, inst.row_lb) and np.array_equal(back.row_ub, inst.row_ub)
        assert np.array_equal(back.integer, inst.integer)

    def test_exported_file_solves_to_same_objective(self, tmp_path):
        st = FleetState.parked([0], 2, 0.8)
        out = np.zeros((2, 3), dtype=int)
        out[0] = 1
        inst = assemble(st, np.zeros((2, 2, 3)), out, ModelParams(fleet_size=1, horizon_T=3),
                        OutageSchedule((OutageEvent(0, 0, 3),), 0.009, 0.0), TWO)
        export_standard_form(inst, tmp_path / "e.mps")
        back = read_standard_form(tmp_path / "e.mps")
        assert solve(back).objective == pytest.approx(solve(inst).objective, rel=1e-4, abs=1e-9)

    def test_unwritable_path(self, tmp_path):
        with pytest.raises(OSError, match="cannot write"):
            export_standard_form(toy(), tmp_path / "missing" / "x.mps")
