import json

import numpy as np
import pytest
from conftest import arrivals, tiny_scenario
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from saev_resilience.demand import ArrivalMatrix, RateMatrix
from saev_resilience.mpc import (
    RunTrace,
    audit_trace,
    concat_arrivals,
    full_horizon_reference,
    initial_state,
    run,
    run_multiday,
)
from saev_resilience.oracle import oracle_solve
from saev_resilience.scenario import ModelParams, Network, OutageEvent, OutageSchedule, ScenarioError

LINE = Network.from_travel_times([[0, 1, 2], [1, 0, 1], [2, 1, 0]])


class TestInitialState:
    def test_explicit_placement(self):
        s = initial_state(ModelParams(fleet_size=3), LINE, [0, 1, 2])
        assert s.U.tolist() == [[1, 0, 0], [0, 1, 0], [0, 0, 1]]
        assert np.all(s.Gamma == 0.8) and s.D.sum() == 0 and s.A.sum() == 0

    def test_uniform_is_reproducible(self):
        p = ModelParams(fleet_size=20)
        a, b = initial_state(p, LINE, "uniform", 5), initial_state(p, LINE, "uniform", 5)
        assert np.array_equal(a.U, b.U)

    def test_demand_weighting_with_single_origin(self):
        lam = np.zeros((3, 3, 48))
        lam[2, 0, :] = 0.5
        s = initial_state(ModelParams(fleet_size=6), LINE, "demand", 1, RateMatrix(lam, 30, 6.0))
        assert s.U[:, 2].sum() == 6

    def test_wrong_length_rejected(self):
        with pytest.raises(ScenarioError, match="fleet of 3"):
            initial_state(ModelParams(fleet_size=3), LINE, [0, 1])


class TestRun:
    def test_zero_demand_is_idle(self):
        sc = tiny_scenario(L=5)
        tr = run(sc, ArrivalMatrix.zeros(3, 5))
        assert tr.complete and tr.steps == 5
        assert all(c.empty for c in tr.controls)
        assert tr.total_waiting == 0

    def test_adjacent_vehicle_serves_passenger_after_one_step(self):
        sc = tiny_scenario(travel=[[0, 1], [1, 0]], K=1, T=3, L=5, placement=[1])
        arr = arrivals(2, 5, [(0, 1, 0, 1)])
        tr = run(sc, arr)
        assert [k["pickups"] for k in tr.kpis] == [0, 1, 0, 0, 0]
        assert tr.total_waiting == 1
        inst, _ = full_horizon_reference(sc, arr)
        assert tr.total_cost == pytest.approx(oracle_solve(inst).objective, abs=1e-9)

    def test_unreachable_outage_halts_with_diagnostic(self):
        sc = tiny_scenario(travel=[[0, 5], [5, 0]], K=1, T=3, L=8, placement=[0], events=[(1, 0, 3)])
        tr = run(sc, ArrivalMatrix.zeros(2, 8))
        assert tr.status == "infeasible" and tr.steps == 0
        assert "step 0" in tr.diagnostic and "node 1" in tr.diagnostic
        assert len(tr.states) == 1

    def test_infeasibility_surfaces_when_outage_enters_window(self):
        sc = tiny_scenario(travel=[[0, 5], [5, 0]], K=1, T=3, L=10, placement=[0], events=[(1, 6, 8)])
        tr = run(sc, ArrivalMatrix.zeros(2, 10))
        assert tr.status == "infeasible" and tr.steps == 4
        assert tr.diagnostic.startswith("step 4") and "[6, 8)" in tr.diagnostic

    def test_relaxed_cover_continues_with_slack(self):
        sc = tiny_scenario(travel=[[0, 5], [5, 0]], K=1, T=3, L=4, placement=[0], events=[(1, 0, 3)],
                           relax_emergency=True)
        tr = run(sc, ArrivalMatrix.zeros(2, 4))
        assert tr.complete
        assert tr.kpis[0]["slack"] == pytest.approx(0.009)

    def test_failed_validation_refused(self):
        sc = tiny_scenario(K=1, events=[(1, 0, 2)], req=0.5)
        with pytest.raises(ScenarioError, match="validation"):
            run(sc, ArrivalMatrix.zeros(3, 5))

    def test_expected_forecast_mode(self):
        lam = np.zeros((3, 3, 48))
        lam[0, 2] = 0.2
        sc = tiny_scenario(L=5, forecast="expected", rates=RateMatrix(lam, 30, 6.0))
        arr = arrivals(3, 5, [(0, 2, 1, 1)])
        tr = run(sc, arr)
        assert tr.complete and audit_trace(tr, arr, sc.params, sc.net) == []

    def test_short_arrival_table_rejected(self):
        with pytest.raises(ScenarioError, match="steps"):
            run(tiny_scenario(L=5), ArrivalMatrix.zeros(3, 4))


class TestTraceFiles:
    def test_json_round_trip(self, tmp_path):
        sc = tiny_scenario(L=4, events=[(1, 1, 3)])
        arr = arrivals(3, 4, [(0, 2, 0, 1), (2, 1, 1, 1)])
        tr = run(sc, arr)
        tr.save(tmp_path / "t.json")
        back = RunTrace.load(tmp_path / "t.json")
        assert back.kpis == json.loads(json.dumps(tr.kpis))
        assert audit_trace(back, arr, sc.params, sc.net) == []
        back.check_lengths()

    def test_csv_extracts(self, tmp_path):
        sc = tiny_scenario(L=3)
        tr = run(sc, arrivals(3, 3, [(0, 2, 0, 1)]))
        kpis, soc, nodes = tr.write_csv(tmp_path)
        assert kpis.read_text().count("\n") == 4
        assert soc.read_text().splitlines()[0] == "step,v0,v1"
        assert ">2" in nodes.read_text()

    def test_audit_detects_tampering(self):
        sc = tiny_scenario(L=3)
        arr = arrivals(3, 3, [(0, 2, 0, 1)])
        tr = run(sc, arr)
        tr.states[2].Gamma[0] += 1e-6
        assert any("SOC" in m for m in audit_trace(tr, arr, sc.params, sc.net))


class TestMultiday:
    def test_identical_quiet_days_double(self):
        sc = tiny_scenario(L=4)
        arr = arrivals(3, 4, [(0, 1, 0, 1), (1, 0, 2, 1)])
        one = run(sc, arr)
        two = run_multiday(sc, [ArrivalMatrix.zeros(3, 4)] * 2, soc_reset=True)
        assert two.steps == 8 and two.total_waiting == 0
        assert one.complete and two.complete

    def test_reset_day_matches_independent_run_from_carried_positions(self):
        sc = tiny_scenario(L=5)
        day1 = arrivals(3, 5, [(0, 2, 1, 1), (2, 0, 3, 1)])
        day2 = arrivals(3, 5, [(1, 0, 0, 1), (0, 1, 2, 1)])
        late = OutageSchedule((OutageEvent(1, 3, 5),), 0.009, 0.0)
        md = run_multiday(sc, [day1, day2], soc_reset=True, outages_per_day=[late, OutageSchedule()])
        end1 = md.states[5]
        start2 = end1.copy()
        start2.Gamma[:] = 0.8
        indep = run(sc, day2, initial=start2, outages=OutageSchedule())
        assert [k["waiting"] for k in md.kpis[5:]] == [k["waiting"] for k in indep.kpis]
        assert np.allclose(md.start_state(5).Gamma, 0.8)
        assert audit_trace(md, concat_arrivals([day1, day2]), sc.params, sc.net) == []

    def test_no_reset_carries_soc_exactly(self):
        sc = tiny_scenario(L=4)
        day = arrivals(3, 4, [(0, 2, 0, 1), (2, 0, 2, 1)])
        md = run_multiday(sc, [day, day], soc_reset=False)
        assert 4 not in md.boundaries
        assert np.array_equal(md.start_state(4).Gamma, md.states[4].Gamma)

    def test_days_must_be_positive(self):
        with pytest.raises(ScenarioError):
            run_multiday(tiny_scenario(), [], days=0)


@st.composite
def oracle_scenarios(draw):
    travel = draw(st.sampled_from([[[0, 1], [1, 0]], [[0, 1, 2], [1, 0, 1], [2, 1, 0]]]))
    n = len(travel)
    K = draw(st.integers(1, 2))
    T = draw(st.integers(2, 3))
    L = draw(st.integers(2, 5))
    placement = draw(st.lists(st.integers(0, n - 1), min_size=K, max_size=K))
    cells = draw(st.lists(st.tuples(st.integers(0, n - 1), st.integers(0, n - 1), st.integers(0, L - 1)),
                          max_size=4))
    cells = [(i, j, s, 1) for i, j, s in cells if i != j]
    terminal = draw(st.sampled_from(["pad", "shrink"]))
    return tiny_scenario(travel, K, T, L, placement, terminal=terminal), arrivals(n, L, cells)


@settings(max_examples=20, deadline=None, suppress_health_check=[HealthCheck.too_slow])
@given(oracle_scenarios())
def test_mpc_never_beats_full_horizon_and_audit_holds(case):
    sc, arr = case
    tr = run(sc, arr)
    assert tr.complete
    assert audit_trace(tr, arr, sc.params, sc.net) == []
    _, ref = full_horizon_reference(sc, arr)
    assert tr.total_cost >= ref.objective - sc.solve.rel_gap * max(1.0, abs(ref.objective)) - 1e-9


@settings(max_examples=15, deadline=None, suppress_health_check=[HealthCheck.too_slow])
@given(oracle_scenarios())
def test_extra_vehicle_never_increases_waiting(case):
    sc, arr = case
    if sc.params.fleet_size > 1:
        return
    more = tiny_scenario(sc.net.travel_time.tolist(), 2, sc.params.horizon_T, sc.params.horizon_L,
                         list(sc.placement) + [0], terminal=sc.terminal)
    assert run(more, arr).total_waiting <= run(sc, arr).total_waiting
