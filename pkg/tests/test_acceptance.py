"""Acceptance criteria, each run at its stated tolerance.

Every test records one PASS/FAIL line that is repeated at the end of the
pytest terminal summary. The mid-scale runs are shared through the
session-wide ``mid_runs`` cache, so the directional checks reuse the run
made by the invariant check.
"""

import math
import os
import time

import numpy as np
import pytest
from conftest import tiny_scenario

from saev_resilience.demand import ArrivalMatrix
from saev_resilience.model import extract_controls, solution_violations
from saev_resilience.mpc import audit_trace, full_horizon_reference, run
from saev_resilience.oracle import OracleRefusal, oracle_solve
from saev_resilience.resilience import (
    CostInputs,
    break_even_frequency,
    building_step_demand_kwh,
    hospital_outage,
    kwh_to_soc,
    min_dischargers,
    v2b_cost,
)
from saev_resilience.scenario import validate_scenario
from saev_resilience.synthetic import full_scale, mid_scale

SEEDS = (0, 1, 2)
NETWORKS = (
    [[0, 1], [1, 0]],
    [[0, 1, 2], [1, 0, 1], [2, 1, 0]],
    [[0, 1, 1], [1, 0, 1], [1, 1, 0]],
)


def random_oracle_scenarios(count, seed, **fixed):
    """``count`` scenarios with N<=3, K<=2, T<=4, L<=6 that pass validation; half carry an outage."""
    rng = np.random.Generator(np.random.Philox(key=seed))
    out = []
    while len(out) < count:
        travel = NETWORKS[rng.integers(len(NETWORKS))]
        n = len(travel)
        K = int(rng.integers(1, 3))
        T = int(fixed.get("T", rng.integers(2, 5)))
        L = int(fixed.get("L", rng.integers(2, 7)))
        placement = [int(x) for x in rng.integers(0, n, K)]
        P = rng.poisson(0.25, (n, n, L))
        for i in range(n):
            P[i, i] = 0
        events = ()
        if len(out) % 2:
            s0 = int(rng.integers(0, L))
            events = ((int(rng.integers(n)), s0, int(min(L, s0 + rng.integers(1, 4)))),)
        req = float(rng.choice([0.004, 0.009, 0.018]))
        sc = tiny_scenario(travel, K, T, L, placement, events, req, terminal=fixed.get("terminal", "pad"))
        if validate_scenario(sc.params, sc.net, sc.outages).status != "fail":
            out.append((sc, ArrivalMatrix(P.astype(np.int64))))
    return out


def test_1_cost_model(verdict):
    inputs = CostInputs(K=30, C_v=45.0, sigma=0.1292, omega=0.0797, B=85.0, theta_c=0.01,
                        T_relo=654.0, q_v2b=139.74, generator_annual=13_367.0)
    c = v2b_cost(inputs)
    be = break_even_frequency(c, inputs.generator_annual)
    ok = (abs(c.C_i - 1350.0) < 0.005 and abs(c.C_e - 29.19) <= 0.01 and abs(c.C_r - 71.82) <= 0.01
          and 118 <= be.frequency <= 122)
    verdict(1, ok, f"C_i={c.C_i:.2f} C_e={c.C_e:.2f} C_r={c.C_r:.2f} f*={be.frequency:.2f}")
    assert ok


def test_2_emergency_requirement(verdict):
    kwh = building_step_demand_kwh(228.2, 120_000.0, 6.0)
    soc = kwh_to_soc(kwh, 85.0)
    req = hospital_outage().requirement
    n = min_dischargers(req, 0.01, 0.9)
    ok = abs(kwh - 312.6) <= 0.1 and abs(soc - 3.678) <= 0.001 and abs(req - 0.1486) <= 5e-4 and n == 17
    verdict(2, ok, f"Q_d={kwh:.2f} kWh = {soc:.4f} SOC, requirement {req:.4f} SOC/step, {n} dischargers")
    assert ok


def test_3_oracle_equivalence(verdict):
    t0 = time.perf_counter()
    cases = random_oracle_scenarios(30, seed=3)
    mismatches, iterations, infeasible = [], 0, 0

    for idx, (sc, arr) in enumerate(cases):
        def check(step, inst, sol, idx=idx):
            nonlocal iterations, infeasible
            iterations += 1
            ref = oracle_solve(inst)
            if sol.feasible != ref.feasible:
                mismatches.append(f"case {idx} step {step}: feasibility {sol.feasible} vs {ref.feasible}")
            elif ref.feasible and abs(sol.objective - ref.objective) > 1e-4 * max(1.0, abs(ref.objective)):
                mismatches.append(f"case {idx} step {step}: {sol.objective} vs {ref.objective}")
            infeasible += not ref.feasible

        run(sc, arr, observer=check)
    elapsed = time.perf_counter() - t0
    ok = not mismatches and len(cases) >= 20 and elapsed < 120
    verdict(3, ok, f"{len(cases)} scenarios, {iterations} iterations ({infeasible} infeasible), "
                   f"{len(mismatches)} mismatches, {elapsed:.1f} s")
    assert ok, mismatches[:5]


@pytest.mark.slow
def test_4_invariants_mid_scale(verdict, mid_runs):
    sc = mid_scale(0)
    arr = sc.arrivals()
    problems = []

    def check(step, inst, sol):
        if not sol.feasible:
            return
        problems.extend(f"step {step}: {m}" for m in solution_violations(inst, sol.values))
        ctl = extract_controls(inst, sol)
        g = float(ctl.discharge.sum())
        if abs(ctl.delivered - sc.params.eta * g) > 1e-6 * max(1.0, abs(ctl.delivered)):
            problems.append(f"step {step}: delivered {ctl.delivered} != eta * {g}")

    t0 = time.perf_counter()
    trace = run(sc, arr, observer=check)
    elapsed = time.perf_counter() - t0
    problems += audit_trace(trace, arr, sc.params, sc.net)
    mid_runs.put(0, (sc, arr, trace))
    ok = trace.complete and not problems and elapsed < 15 * 60
    verdict(4, ok, f"{trace.steps} iterations, {int(arr.P.sum())} passengers, {len(problems)} violations, "
                   f"{elapsed:.0f} s")
    assert ok, problems[:5]


def _trace(mid_runs, seed, **kw):
    if kw.get("fleet_size") == 10:
        del kw["fleet_size"]
    return mid_runs.get(seed, **kw)[2]


@pytest.mark.slow
def test_5a_emergency_costs_waiting_and_relocation(verdict, mid_runs):
    from saev_resilience.analytics import summarize

    rows = []
    for seed in SEEDS:
        e = summarize(_trace(mid_runs, seed))
        n = summarize(_trace(mid_runs, seed, outage_node=None))
        rows.append((seed, e.total_waiting_min, n.total_waiting_min, e.total_relocation_min, n.total_relocation_min))
    ok = all(ew >= nw and er >= nr for _, ew, nw, er, nr in rows)
    verdict("5a", ok, "; ".join(f"seed {s}: waiting {ew:g}>={nw:g}, relocation {er:g}>={nr:g}"
                                for s, ew, nw, er, nr in rows))
    assert ok


@pytest.mark.slow
def test_5b_waiting_non_increasing_in_fleet_size(verdict, mid_runs):
    rows = []
    for seed in SEEDS:
        waits = [_trace(mid_runs, seed, outage_node=None, fleet_size=K).total_waiting * 6.0 for K in (6, 8, 10)]
        rows.append((seed, waits))
    ok = all(w[0] >= w[1] >= w[2] for _, w in rows)
    verdict("5b", ok, "; ".join(f"seed {s}: K=6,8,10 waiting {w}" for s, w in rows))
    assert ok


@pytest.mark.slow
def test_5c_fast_charging_does_not_increase_waiting(verdict, mid_runs):
    rows = []
    for seed in SEEDS:
        slow = _trace(mid_runs, seed).total_waiting * 6.0
        fast = _trace(mid_runs, seed, theta_c=0.1, theta_v2b=0.1).total_waiting * 6.0
        rows.append((seed, fast, slow))
    ok = all(f <= s for _, f, s in rows)
    verdict("5c", ok, "; ".join(f"seed {s}: fast {f:g} <= slow {w:g}" for s, f, w in rows))
    assert ok


@pytest.mark.slow
def test_5d_outage_at_demand_hub_waits_less(verdict, mid_runs):
    rows = []
    for seed in SEEDS:
        remote = _trace(mid_runs, seed).total_waiting * 6.0
        hub = _trace(mid_runs, seed, outage_node=0).total_waiting * 6.0
        rows.append((seed, hub, remote))
    ok = all(h <= r for _, h, r in rows)
    verdict("5d", ok, "; ".join(f"seed {s}: hub {h:g} <= remote {r:g}" for s, h, r in rows))
    assert ok


@pytest.mark.stretch
@pytest.mark.skipif(os.environ.get("SAEV_STRETCH") != "1", reason="full-scale run; set SAEV_STRETCH=1")
def test_6_full_scale_stretch(verdict):
    sc = full_scale(0)
    arr = sc.arrivals()
    t0 = time.perf_counter()
    trace = run(sc, arr)
    elapsed = time.perf_counter() - t0
    ok = trace.complete and elapsed < 12 * 3600 and trace.total_waiting == 0
    verdict(6, ok, f"seed 0, {int(arr.P.sum())} passengers, waiting {trace.total_waiting * 6.0:g} min, "
                   f"{elapsed / 3600:.2f} h")
    assert ok


def _full_horizon(sc, arr):
    """Enumerated full-horizon optimum, or the backend's when enumeration is too large."""
    inst, sol = full_horizon_reference(sc, arr)
    try:
        return oracle_solve(inst)
    except OracleRefusal:
        return sol


def test_7_mpc_suboptimality(verdict):
    gap = 1e-4
    below, unequal = [], []
    general = random_oracle_scenarios(20, seed=7)
    for idx, (sc, arr) in enumerate(general):
        tr = run(sc, arr)
        ref = _full_horizon(sc, arr)
        if not (tr.complete and ref.feasible):
            if tr.complete and not ref.feasible:
                below.append(f"case {idx}: MPC feasible, full horizon infeasible")
            continue
        if tr.total_cost < ref.objective - gap * max(1.0, abs(ref.objective)) - 1e-9:
            below.append(f"case {idx}: {tr.total_cost} < {ref.objective}")
    covering = random_oracle_scenarios(10, seed=77, T=4, L=4, terminal="shrink")
    covering += random_oracle_scenarios(10, seed=78, T=4, L=3, terminal="shrink")
    for idx, (sc, arr) in enumerate(covering):
        tr = run(sc, arr)
        ref = _full_horizon(sc, arr)
        if tr.complete != ref.feasible:
            unequal.append(f"case {idx}: feasibility {tr.complete} vs {ref.feasible}")
        elif ref.feasible and not math.isclose(tr.total_cost, ref.objective, rel_tol=gap, abs_tol=1e-6):
            unequal.append(f"case {idx}: {tr.total_cost} vs {ref.objective}")
    ok = not below and not unequal
    verdict(7, ok, f"{len(general)} scenarios with MPC >= full horizon ({len(below)} below), "
                   f"{len(covering)} with T >= L equal ({len(unequal)} unequal)")
    assert ok, (below + unequal)[:5]
