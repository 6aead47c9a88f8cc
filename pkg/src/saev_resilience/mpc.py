"""Receding-horizon control loop.

At every real-time step the engine builds a T-step MILP from the current
fleet state, solves it, applies the first-step controls and hands the
step-1 state of the solution to the next iteration.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .config import Scenario
from .demand import ArrivalMatrix, RateMatrix
from .model import (
    ControlSet,
    FleetState,
    ModelError,
    assemble,
    extract_controls,
    extract_next_state,
    propagate,
    stage_cost,
)
from .resilience import outage_mask, outage_window
from .scenario import ModelParams, Network, OutageSchedule, ScenarioError, validate_scenario
from .solver import SolveOptions, solve

logger = logging.getLogger(__name__)

AUDIT_TOL = 1e-9
KPI_FIELDS = ("step", "waiting", "pickups", "relocations", "relocation_steps", "charge_soc",
              "discharge_soc", "delivered", "requirement", "outage_nodes", "slack", "stage_cost")


def initial_state(params: ModelParams, net: Network, placement="uniform", seed: int = 0,
                  rates: RateMatrix | None = None) -> FleetState:
    """All vehicles parked at SOC ``gamma_init`` with an empty queue.

    Args:
        placement: ``"uniform"`` draws nodes uniformly, ``"demand"`` draws them
            proportionally to each node's expected outgoing demand, and a list
            gives one node per vehicle.
        seed: key of the Philox stream used for the random policies.
        rates: required for ``"demand"``.
    """
    K, N = params.fleet_size, net.n
    rng = np.random.Generator(np.random.Philox(key=int(seed)))
    if isinstance(placement, str):
        if placement == "uniform":
            nodes = rng.integers(0, N, size=K)
        elif placement == "demand":
            if rates is None:
                raise ScenarioError("demand-weighted placement needs a rate matrix")
            w = rates.lam.sum(axis=(1, 2))
            if w.sum() <= 0:
                raise ScenarioError("demand-weighted placement needs some non-zero rate")
            nodes = rng.choice(N, size=K, p=w / w.sum())
        else:
            raise ScenarioError(f"unknown placement policy {placement!r}")
    else:
        nodes = [int(x) for x in placement]
        if len(nodes) != K:
            raise ScenarioError(f"placement lists {len(nodes)} nodes for a fleet of {K}")
        if any(not 0 <= x < N for x in nodes):
            raise ScenarioError("placement names a node outside the network")
    return FleetState.parked(nodes, N, params.gamma_init, max(net.max_thetas))


@dataclass
class RunTrace:
    """Everything a run produced, one entry per real-time step.

    ``states`` has one more entry than ``controls``; ``boundaries`` maps a
    step to the state the controller actually started from when it differs
    from ``states[step]`` (SOC reset between days).
    """

    states: list = field(default_factory=list)
    controls: list = field(default_factory=list)
    kpis: list = field(default_factory=list)
    solver_stats: list = field(default_factory=list)
    seed: int = 0
    fingerprint: str = ""
    status: str = "complete"
    diagnostic: str = ""
    tau_minutes: float = 6.0
    meta: dict = field(default_factory=dict)
    boundaries: dict = field(default_factory=dict)

    @property
    def steps(self) -> int:
        return len(self.controls)

    @property
    def complete(self) -> bool:
        return self.status == "complete"

    @property
    def total_cost(self) -> float:
        return float(sum(k["stage_cost"] for k in self.kpis))

    @property
    def total_waiting(self) -> int:
        return int(sum(k["waiting"] for k in self.kpis))

    @property
    def flagged_gaps(self) -> list[int]:
        return [s["step"] for s in self.solver_stats if s.get("gap_flag")]

    def start_state(self, step: int) -> FleetState:
        return self.boundaries.get(step, self.states[step])

    def check_lengths(self) -> None:
        n = len(self.controls)
        if len(self.states) != n + 1 or len(self.kpis) != n:
            raise ModelError(f"trace lengths disagree: {len(self.states)} states, {n} controls, "
                             f"{len(self.kpis)} KPI rows")

    def to_dict(self, timings: bool = True) -> dict:
        """JSON-ready form; ``timings=False`` drops wall-clock times for byte-stable output."""
        stats = self.solver_stats if timings else [
            {k: v for k, v in s.items() if k != "wall_time"} for s in self.solver_stats]
        return {
            "format": "saev-trace/1",
            "status": self.status,
            "diagnostic": self.diagnostic,
            "seed": self.seed,
            "fingerprint": self.fingerprint,
            "tau_minutes": self.tau_minutes,
            "meta": self.meta,
            "states": [s.to_dict() for s in self.states],
            "controls": [c.to_dict() for c in self.controls],
            "kpis": self.kpis,
            "solver_stats": stats,
            "boundaries": {str(k): v.to_dict() for k, v in sorted(self.boundaries.items())},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunTrace":
        return cls(
            states=[FleetState.from_dict(s) for s in d["states"]],
            controls=[ControlSet.from_dict(c) for c in d["controls"]],
            kpis=list(d["kpis"]),
            solver_stats=list(d["solver_stats"]),
            seed=d["seed"],
            fingerprint=d["fingerprint"],
            status=d["status"],
            diagnostic=d["diagnostic"],
            tau_minutes=d["tau_minutes"],
            meta=d.get("meta", {}),
            boundaries={int(k): FleetState.from_dict(v) for k, v in d.get("boundaries", {}).items()},
        )

    def save(self, path, timings: bool = True) -> None:
        Path(path).write_text(json.dumps(self.to_dict(timings), indent=1, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "RunTrace":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def write_csv(self, out_dir, prefix: str = "") -> list[Path]:
        """Per-step KPIs plus per-vehicle SOC and node series (wide, one row per step).

        The node series shows the node a vehicle is parked at, or the node it
        is heading to prefixed with ``>`` while in transit.
        """
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = [out / f"{prefix}kpis.csv", out / f"{prefix}soc.csv", out / f"{prefix}nodes.csv"]
        with open(paths[0], "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(KPI_FIELDS)
            for row in self.kpis:
                w.writerow([_fmt(row[f]) for f in KPI_FIELDS])
        K = self.states[0].K if self.states else 0
        header = ["step"] + [f"v{k}" for k in range(K)]
        with open(paths[1], "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for step, s in enumerate(self.states):
                w.writerow([step] + [_fmt(g) for g in s.Gamma])
        with open(paths[2], "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for step, s in enumerate(self.states):
                cells = []
                for k in range(K):
                    loc = s.location(k)
                    cells.append(str(loc[1]) if loc[0] == "parked" else f">{loc[1]}")
                w.writerow([step] + cells)
        return paths


def _fmt(x) -> str:
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(round(float(x), 12))


def audit_trace(trace: RunTrace, arrivals: ArrivalMatrix, params: ModelParams, net: Network) -> list[str]:
    """Recompute every state from its predecessor and report disagreements.

    Binary flags and queue counts must match exactly, SOC within 1e-9.
    """
    problems = []
    try:
        trace.check_lengths()
    except ModelError as exc:
        return [str(exc)]
    for step, ctl in enumerate(trace.controls):
        base = trace.start_state(step)
        try:
            expect = propagate(base, ctl, arrivals.P[:, :, step], params, net)
        except ModelError as exc:
            problems.append(f"step {step}: {exc}")
            continue
        got = trace.states[step + 1]
        if not np.array_equal(expect.D, got.D):
            problems.append(f"step {step}: queue differs")
        if not np.array_equal(expect.U, got.U) or not np.array_equal(expect.A, got.A):
            problems.append(f"step {step}: vehicle positions differ")
        err = float(np.max(np.abs(expect.Gamma - got.Gamma))) if got.K else 0.0
        if err > AUDIT_TOL:
            problems.append(f"step {step}: SOC differs by {err:.3g}")
    return problems


def _kpi_row(step, state, ctl, params, net, requirement, outage_nodes) -> dict:
    return {
        "step": step,
        "waiting": int(state.D.sum()),
        "pickups": len(ctl.pickups),
        "relocations": len(ctl.relocations),
        "relocation_steps": int(sum(net.travel_time[i, j] for _, i, j in ctl.relocations)),
        "charge_soc": float(np.sum(ctl.charge)),
        "discharge_soc": float(np.sum(ctl.discharge)),
        "delivered": float(ctl.delivered),
        "requirement": float(requirement),
        "outage_nodes": int(outage_nodes),
        "slack": float(ctl.slack),
        "stage_cost": stage_cost(state, ctl, params, net, step),
    }


def _forecast(scenario: Scenario, arrivals: ArrivalMatrix, step: int, T: int, expected) -> np.ndarray:
    window = arrivals.window(step, T).astype(float)
    if expected is not None and T > 1:
        hi = min(step + T, expected.shape[2])
        rest = np.zeros((arrivals.n, arrivals.n, T - 1))
        if hi > step + 1:
            rest[:, :, : hi - step - 1] = expected[:, :, step + 1: hi]
        window[:, :, 1:] = rest
    return window


def _describe_outages(outages: OutageSchedule, lo: int, hi: int) -> str:
    active = [e for e in outages.events if e.start_step < hi and e.end_step > lo]
    if not active:
        return "no outage active in the window"
    return "; ".join(f"outage at node {e.node} over steps [{e.start_step}, {e.end_step})" for e in active)


def run(scenario: Scenario, arrivals: ArrivalMatrix, opts: SolveOptions | None = None,
        initial: FleetState | None = None, seed: int | None = None, backend: str | None = None,
        outages: OutageSchedule | None = None, observer=None) -> RunTrace:
    """Drive the fleet through ``L`` real-time steps.

    Args:
        scenario: model parameters, network, outages and MPC switches.
        arrivals: realized demand; its length must cover ``L``.
        opts: solver settings (defaults to the scenario's).
        initial: starting state; built from the scenario placement when omitted.
        seed: recorded in the trace (demand seed of the caller).
        outages: overrides the scenario's outage schedule for this run.
        observer: called as ``observer(step, instance, solution)`` after every solve.

    Returns:
        The trace. On an infeasible iteration the run stops, ``status`` is
        ``"infeasible"`` and ``diagnostic`` names the step and active outages.
    """
    params, net = scenario.params, scenario.net
    outages = scenario.outages if outages is None else outages
    opts = opts or scenario.solve
    L, T = params.horizon_L, params.horizon_T
    if arrivals.n != net.n:
        raise ScenarioError(f"arrivals cover {arrivals.n} nodes, network has {net.n}")
    if arrivals.L < L:
        raise ScenarioError(f"arrivals cover {arrivals.L} steps, the run needs {L}")
    report = validate_scenario(params, net, outages)
    if report.status == "fail":
        raise ScenarioError(f"scenario failed validation:\n{report}")

    state = initial if initial is not None else initial_state(
        params, net, scenario.placement, scenario.placement_seed, scenario.rates)
    state.check(params, net)
    mask = outage_mask(outages, L, net.n)
    expected = None
    if scenario.forecast == "expected":
        if scenario.rates is None:
            raise ScenarioError("expected-rate forecasts need a rate matrix")
        rates = scenario.rates
        if scenario.passengers is not None:
            rates = rates.scaled_to(scenario.passengers, L)
        expected = rates.per_step(min(L, rates.coverage))
    relax = scenario.emergency_penalty if scenario.relax_emergency else None

    trace = RunTrace(states=[state], seed=scenario.demand_seed if seed is None else seed,
                     fingerprint=scenario.fingerprint(), tau_minutes=params.tau_minutes,
                     meta={"name": scenario.name, "terminal": scenario.terminal,
                           "base_fingerprint": scenario.fingerprint(include_outage=False),
                           "forecast": scenario.forecast, "L": L, "T": T,
                           "params": asdict(params)})
    for step in range(L):
        horizon = T if scenario.terminal == "pad" else min(T, L - step)
        inst = assemble(state, _forecast(scenario, arrivals, step, horizon, expected),
                        outage_window(mask, step, horizon), params, outages, net,
                        start_step=step, relax_penalty=relax)
        sol = solve(inst, opts, backend)
        if observer is not None:
            observer(step, inst, sol)
        gap = sol.gap
        trace.solver_stats.append({
            "step": step, "status": sol.status, "objective": sol.objective, "gap": gap,
            "wall_time": sol.wall_time, "rows": inst.n_rows, "cols": inst.n_cols,
            "gap_flag": bool(sol.feasible and not math.isnan(gap) and gap > opts.rel_gap),
        })
        if not sol.feasible:
            trace.status = "infeasible" if sol.status == "infeasible" else sol.status
            trace.diagnostic = (f"step {step}: solver returned {sol.status}; "
                                f"{_describe_outages(outages, step, step + horizon)}")
            logger.warning("run halted: %s", trace.diagnostic)
            break
        ctl = extract_controls(inst, sol)
        nxt = extract_next_state(inst, sol)
        trace.kpis.append(_kpi_row(step, state, ctl, params, net, inst.problem.requirement[0],
                                   int(inst.problem.outage[:, 0].sum())))
        trace.controls.append(ctl)
        trace.states.append(nxt)
        state = nxt
        if sol.status != "optimal":
            logger.info("step %d accepted with status %s (gap %.3g)", step, sol.status, gap)
    return trace


def run_multiday(scenario: Scenario, arrivals_per_day, days: int | None = None, soc_reset: bool = True,
                 opts: SolveOptions | None = None, outages_per_day=None, initial: FleetState | None = None,
                 backend: str | None = None) -> RunTrace:
    """Consecutive daily runs; positions carry over, SOC optionally resets to ``gamma_init``.

    ``outages_per_day`` gives one schedule per day (default: the scenario's
    schedule every day). Steps in the concatenated trace are numbered
    continuously; ``boundaries`` records the post-reset starting states.
    """
    arrivals_per_day = list(arrivals_per_day)
    days = len(arrivals_per_day) if days is None else days
    if days < 1:
        raise ScenarioError("days must be >= 1")
    if len(arrivals_per_day) < days:
        raise ScenarioError(f"{len(arrivals_per_day)} arrival tables for {days} days")
    if outages_per_day is None:
        outages_per_day = [scenario.outages] * days
    merged = None
    state = initial
    for day in range(days):
        if state is not None and day > 0 and soc_reset:
            state = state.copy()
            state.Gamma = np.full(state.K, scenario.params.gamma_init)
        tr = run(scenario, arrivals_per_day[day], opts, initial=state, outages=outages_per_day[day],
                 backend=backend)
        for row in tr.kpis:
            row["day"] = day
        if merged is None:
            merged = tr
            merged.meta["days"] = days
        else:
            offset = merged.steps
            if not _same_state(state, merged.states[-1]):
                merged.boundaries[offset] = state
            for row in tr.kpis:
                row["step"] += offset
            for row in tr.solver_stats:
                row["step"] += offset
            merged.states.extend(tr.states[1:])
            merged.controls.extend(tr.controls)
            merged.kpis.extend(tr.kpis)
            merged.solver_stats.extend(tr.solver_stats)
            merged.status, merged.diagnostic = tr.status, (
                f"day {day}, {tr.diagnostic}" if tr.diagnostic else "")
        if not tr.complete:
            if day == 0:
                merged.diagnostic = f"day 0, {tr.diagnostic}"
            break
        state = tr.states[-1]
    return merged


def _same_state(a: FleetState, b: FleetState) -> bool:
    return (np.array_equal(a.D, b.D) and np.array_equal(a.U, b.U) and np.array_equal(a.A, b.A)
            and np.array_equal(a.Gamma, b.Gamma))


def concat_arrivals(days) -> ArrivalMatrix:
    return ArrivalMatrix(np.concatenate([d.P for d in days], axis=2))


def full_horizon_reference(scenario: Scenario, arrivals: ArrivalMatrix, opts: SolveOptions | None = None,
                           initial: FleetState | None = None, backend: str | None = None):
    """Solve the whole ``L``-step problem once; returns ``(instance, solution)``.

    The objective is directly comparable with ``RunTrace.total_cost``.
    """
    params, net = scenario.params, scenario.net
    L = params.horizon_L
    state = initial if initial is not None else initial_state(
        params, net, scenario.placement, scenario.placement_seed, scenario.rates)
    mask = outage_mask(scenario.outages, L, net.n)
    relax = scenario.emergency_penalty if scenario.relax_emergency else None
    inst = assemble(state, arrivals.window(0, L), mask, params.with_(horizon_T=L), scenario.outages, net,
                    relax_penalty=relax)
    return inst, solve(inst, opts or scenario.solve, backend)
