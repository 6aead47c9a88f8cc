"""KPIs, normal-versus-emergency comparisons, sweeps and report files.

Report layout written by :func:`emit_reports`::

    summary.csv            one row per (axis value, seed), with a status column
    baseline.csv           no-outage reference runs per seed (outage sweeps only)
    cost.csv               cost breakdown per point against its seed's baseline
    traces/<run>.json      full trace of every run
    waiting_vs_<axis>.dat  "value mean_waiting_min" over feasible seeds
    relocation_vs_<axis>.dat
    waiting_by_seed_<axis>.dat   "value seed waiting_min"
    discharge_by_vehicle.dat     "vehicle discharge_soc" summed over outage steps

All numbers are written with ``repr`` of values rounded to 12 digits so
repeated emission of the same report is byte-identical.
"""

from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .config import Scenario
from .mpc import RunTrace, run
from .resilience import BreakEven, CostBreakdown, CostInputs, break_even_frequency, v2b_cost
from .scenario import ModelParams, OutageEvent, OutageSchedule, ScenarioError
from .solver import SolveOptions

logger = logging.getLogger(__name__)

AXES = ("passengers", "fleet_size", "outage_start", "outage_node", "outage_length", "charge_rate")


@dataclass
class KpiSummary:
    total_waiting_min: float = 0.0
    total_relocation_min: float = 0.0
    total_charge_soc: float = 0.0
    charge_eur: float = 0.0
    total_discharge_soc: float = 0.0
    outage_discharge_soc: float = 0.0
    q_v2b_kwh: float = 0.0
    delivered_outage_soc: float = 0.0
    final_soc: list = field(default_factory=list)
    outage_discharge_by_vehicle: list = field(default_factory=list)
    steps: int = 0
    infeasible: bool = False
    status: str = "complete"
    fingerprint: str = ""
    base_fingerprint: str = ""

    ROW_FIELDS = ("status", "steps", "total_waiting_min", "total_relocation_min", "total_charge_soc",
                  "charge_eur", "total_discharge_soc", "q_v2b_kwh")

    def row(self) -> dict:
        return {f: getattr(self, f) for f in self.ROW_FIELDS}


def _trace_params(trace: RunTrace, params: ModelParams | None) -> ModelParams:
    if params is not None:
        return params
    p = dict(trace.meta.get("params") or {})
    if not p:
        raise ScenarioError("trace carries no parameters; pass them explicitly")
    if isinstance(p.get("sigma"), list):
        p["sigma"] = tuple(p["sigma"])
    return ModelParams(**p)


def summarize(trace: RunTrace, params: ModelParams | None = None, outage: OutageSchedule | None = None) -> KpiSummary:
    """KPIs recomputed from the trace's states and controls.

    Waiting minutes are ``tau * sum(D)``; relocation minutes are
    ``tau * t_ij`` for every relocation started. The euro charge figure is
    ``B * (sigma * (sum e - eta * sum g) + omega * sum g)``. Outage steps are
    those where the controller saw an active outage; ``outage`` overrides
    that with an explicit schedule.
    """
    p = _trace_params(trace, params)
    tau, B = p.tau_minutes, p.battery_kwh
    n = trace.steps
    K = trace.states[0].K if trace.states else 0
    if outage is not None:
        active = np.zeros(n, dtype=bool)
        for ev in outage.events:
            active[max(ev.start_step, 0): min(ev.end_step, n)] = True
    else:
        active = np.array([row.get("outage_nodes", 0) > 0 for row in trace.kpis], dtype=bool)
    waiting = sum(int(trace.start_state(s).D.sum()) for s in range(n))
    relo_steps = sum(int(row["relocation_steps"]) for row in trace.kpis)
    charge = 0.0
    discharge = 0.0
    eur = 0.0
    by_vehicle = np.zeros(K)
    delivered_out = 0.0
    for s, ctl in enumerate(trace.controls):
        e, g = float(np.sum(ctl.charge)), float(np.sum(ctl.discharge))
        charge += e
        discharge += g
        price = p.price_at(s % p.horizon_L if p.horizon_L else s)
        eur += B * (price * (e - p.eta * g) + p.omega * g)
        if active[s]:
            by_vehicle += ctl.discharge
            delivered_out += ctl.delivered
    outage_g = float(by_vehicle.sum())
    return KpiSummary(
        total_waiting_min=tau * waiting,
        total_relocation_min=tau * relo_steps,
        total_charge_soc=charge,
        charge_eur=eur,
        total_discharge_soc=discharge,
        outage_discharge_soc=outage_g,
        q_v2b_kwh=B * outage_g,
        delivered_outage_soc=delivered_out,
        final_soc=[float(x) for x in trace.states[-1].Gamma] if trace.states else [],
        outage_discharge_by_vehicle=[float(x) for x in by_vehicle],
        steps=n,
        infeasible=trace.status == "infeasible",
        status=trace.status,
        fingerprint=trace.fingerprint,
        base_fingerprint=trace.meta.get("base_fingerprint", ""),
    )


@dataclass(frozen=True)
class DeltaReport:
    d_waiting_min: float
    d_relocation_min: float
    d_charge_eur: float
    q_v2b_kwh: float
    flags: tuple[str, ...] = ()

    def cost_inputs(self, **kw) -> CostInputs:
        return CostInputs(T_relo=self.d_relocation_min, q_v2b=self.q_v2b_kwh, **kw)


def compare(normal: KpiSummary, emergency: KpiSummary) -> DeltaReport:
    """Emergency minus normal; both runs must share everything but the outage."""
    if normal.base_fingerprint != emergency.base_fingerprint:
        raise ScenarioError(
            f"runs differ beyond the outage (fingerprints {normal.base_fingerprint} vs "
            f"{emergency.base_fingerprint})"
        )
    d_relo = emergency.total_relocation_min - normal.total_relocation_min
    flags = []
    if d_relo < 0:
        flags.append("negative relocation delta")
        logger.warning("emergency run relocated %.1f min less than the normal run", -d_relo)
    if normal.infeasible or emergency.infeasible:
        flags.append("partial trace")
    return DeltaReport(
        emergency.total_waiting_min - normal.total_waiting_min,
        d_relo,
        emergency.charge_eur - normal.charge_eur,
        emergency.q_v2b_kwh,
        tuple(flags),
    )


# --------------------------------------------------------------------------- #
# sweeps


@dataclass
class SweepSpec:
    """One axis varied over ``values`` for every seed in ``seeds``.

    ``charge_rate`` sets both the charging and the discharging rate.
    ``outage_start``/``outage_length``/``outage_node`` rewrite every event of
    the base schedule; ``passengers`` rescales the sampled demand.
    """

    base: Scenario
    axis: str
    values: list
    seeds: list = field(default_factory=lambda: [0])
    baseline: bool | None = None  # no-outage reference per seed; default: when outages exist

    def __post_init__(self):
        if self.axis not in AXES:
            raise ScenarioError(f"unknown sweep axis {self.axis!r}; choose from {', '.join(AXES)}")
        self.values = list(self.values)
        self.seeds = [int(s) for s in self.seeds]
        for v in self.values:
            point_scenario(self.base, self.axis, v)

    @property
    def with_baseline(self) -> bool:
        return bool(self.base.outages.events) if self.baseline is None else self.baseline


def point_scenario(base: Scenario, axis: str, value) -> Scenario:
    """The base scenario with one axis set to ``value`` (validated)."""
    p = base.params
    evs = base.outages.events
    if axis == "passengers":
        if value < 0:
            raise ScenarioError("passengers must be >= 0")
        return replace(base, passengers=float(value))
    if axis == "fleet_size":
        if int(value) != value or value < 1:
            raise ScenarioError("fleet_size values must be positive integers")
        if not isinstance(base.placement, str):
            raise ScenarioError("fleet_size sweeps need a random placement policy")
        return base.with_params(fleet_size=int(value))
    if axis == "charge_rate":
        if not 0 < value <= p.gamma_max - p.gamma_min:
            raise ScenarioError(f"charge rate {value} outside (0, {p.gamma_max - p.gamma_min}]")
        return base.with_params(theta_c=float(value), theta_v2b=float(value))
    if not evs:
        raise ScenarioError(f"axis {axis} needs at least one outage event in the base scenario")
    if axis == "outage_node":
        if not 0 <= int(value) < base.net.n:
            raise ScenarioError(f"outage node {value} outside the network")
        new = tuple(OutageEvent(int(value), e.start_step, e.end_step) for e in evs)
    elif axis == "outage_start":
        if not 0 <= int(value) < p.horizon_L:
            raise ScenarioError(f"outage start {value} outside [0, {p.horizon_L})")
        new = tuple(OutageEvent(e.node, int(value), int(value) + e.end_step - e.start_step) for e in evs)
    else:
        if int(value) < 1:
            raise ScenarioError("outage length must be >= 1 step")
        new = tuple(OutageEvent(e.node, e.start_step, e.start_step + int(value)) for e in evs)
    return base.with_outages(replace(base.outages, events=new))


@dataclass
class SweepPoint:
    axis: str
    value: object
    seed: int
    status: str
    summary: KpiSummary | None = None
    trace: RunTrace | None = None
    error: str = ""

    @property
    def label(self) -> str:
        return f"{self.axis}={self.value}_seed{self.seed}"


@dataclass
class SweepReport:
    axis: str
    points: list = field(default_factory=list)
    baselines: dict = field(default_factory=dict)  # seed -> SweepPoint
    base: Scenario | None = None

    def by_value(self) -> dict:
        out: dict = {}
        for pt in self.points:
            out.setdefault(pt.value, []).append(pt)
        return out


def _run_point(args) -> SweepPoint:
    axis, value, seed, scenario, arrivals, opts = args
    try:
        tr = run(scenario, arrivals, opts, seed=seed)
        return SweepPoint(axis, value, seed, tr.status, summarize(tr), tr,
                          tr.diagnostic if not tr.complete else "")
    except ScenarioError as exc:
        status = "infeasible" if "validation" in str(exc) else "error"
        return SweepPoint(axis, value, seed, status, error=str(exc))
    except Exception as exc:  # recorded, never fatal to the sweep
        logger.exception("sweep point %s=%s seed %d failed", axis, value, seed)
        return SweepPoint(axis, value, seed, "error", error=f"{type(exc).__name__}: {exc}")


def sweep(spec: SweepSpec, opts: SolveOptions | None = None, workers: int = 1,
          arrivals: dict | None = None) -> SweepReport:
    """Run every (value, seed) point; infeasible or failing points are recorded, not raised.

    One arrival table is drawn per seed and shared across axis values (the
    passengers axis rescales rates, so it draws per value with the same seed).
    ``arrivals`` may supply the per-seed tables directly.
    """
    opts = opts or spec.base.solve
    arrivals = dict(arrivals or {})
    jobs = []
    for seed in spec.seeds:
        if seed not in arrivals:
            arrivals[seed] = spec.base.arrivals(seed)
    if spec.with_baseline:
        for seed in spec.seeds:
            jobs.append(("baseline", None, seed, spec.base.with_outages(replace(spec.base.outages, events=())),
                         arrivals[seed], opts))
    for value in spec.values:
        sc = point_scenario(spec.base, spec.axis, value)
        for seed in spec.seeds:
            arr = sc.arrivals(seed) if spec.axis == "passengers" else arrivals[seed]
            jobs.append((spec.axis, value, seed, sc, arr, opts))
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_point, jobs))
    else:
        results = [_run_point(j) for j in jobs]
    report = SweepReport(spec.axis, base=spec.base)
    for pt in results:
        if pt.axis == "baseline":
            report.baselines[pt.seed] = pt
        else:
            report.points.append(pt)
    return report


# --------------------------------------------------------------------------- #
# reports


def _num(x) -> str:
    if x is None:
        return ""
    if isinstance(x, (bool, np.bool_)):
        return str(bool(x)).lower()
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, float) and (math.isinf(x) or math.isnan(x)):
        return repr(x)
    if isinstance(x, (float, np.floating)):
        return repr(round(float(x), 12))
    return str(x)


def _write_csv(path: Path, header, rows) -> None:
    try:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for r in rows:
                w.writerow([_num(x) for x in r])
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc


def _write_dat(path: Path, header: str, rows) -> None:
    try:
        with open(path, "w") as fh:
            fh.write(f"# {header}\n")
            for r in rows:
                fh.write(" ".join(_num(x) for x in r) + "\n")
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc


def point_costs(point: SweepPoint, baseline: SweepPoint | None, inputs: CostInputs) -> tuple[CostBreakdown, BreakEven]:
    d_relo = 0.0
    if baseline is not None and baseline.summary is not None and point.summary is not None:
        d_relo = point.summary.total_relocation_min - baseline.summary.total_relocation_min
    q = point.summary.q_v2b_kwh if point.summary else 0.0
    ci = replace(inputs, T_relo=d_relo, q_v2b=q)
    costs = v2b_cost(ci)
    return costs, break_even_frequency(costs, inputs.generator_annual)


def emit_reports(report: SweepReport, out_dir, cost_inputs: CostInputs | None = None) -> list[Path]:
    """Write the report files listed in the module docstring; returns their paths."""
    out = Path(out_dir)
    try:
        (out / "traces").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create {out}: {exc}") from exc
    written = []
    axis = report.axis
    header = ["axis", "value", "seed", *KpiSummary.ROW_FIELDS, "error"]

    def rows_of(points):
        for pt in points:
            s = pt.summary.row() if pt.summary else {f: None for f in KpiSummary.ROW_FIELDS}
            s["status"] = pt.status
            yield [pt.axis, pt.value, pt.seed, *[s[f] for f in KpiSummary.ROW_FIELDS], pt.error]

    path = out / "summary.csv"
    _write_csv(path, header, rows_of(report.points))
    written.append(path)
    if report.baselines:
        path = out / "baseline.csv"
        _write_csv(path, header, rows_of([report.baselines[s] for s in sorted(report.baselines)]))
        written.append(path)

    for pt in [*report.points, *[report.baselines[s] for s in sorted(report.baselines)]]:
        if pt.trace is not None:
            name = "baseline" if pt.axis == "baseline" else f"{pt.axis}_{pt.value}"
            path = out / "traces" / f"{name}_seed{pt.seed}.json"
            pt.trace.save(path, timings=False)
            written.append(path)

    groups = report.by_value()
    mean_rows, relo_rows, seed_rows = [], [], []
    for value, pts in groups.items():
        ok = [p for p in pts if p.summary is not None and p.status == "complete"]
        mean_rows.append((value, float(np.mean([p.summary.total_waiting_min for p in ok])) if ok else math.nan))
        relo_rows.append((value, float(np.mean([p.summary.total_relocation_min for p in ok])) if ok else math.nan))
        for p in pts:
            seed_rows.append((value, p.seed, p.summary.total_waiting_min if p.summary and p.status == "complete"
                              else math.nan))
    for name, head, rows in ((f"waiting_vs_{axis}.dat", f"{axis} mean_waiting_min", mean_rows),
                             (f"relocation_vs_{axis}.dat", f"{axis} mean_relocation_min", relo_rows),
                             (f"waiting_by_seed_{axis}.dat", f"{axis} seed waiting_min", seed_rows)):
        path = out / name
        _write_dat(path, head, rows)
        written.append(path)

    has_outage = any(p.summary is not None and p.summary.outage_discharge_by_vehicle
                     and (p.trace and any(r.get("outage_nodes", 0) for r in p.trace.kpis))
                     for p in report.points)
    if has_outage:
        inputs = cost_inputs or CostInputs()
        cost_rows = []
        veh = None
        for pt in report.points:
            if pt.summary is None:
                cost_rows.append((pt.value, pt.seed, pt.status, *[None] * 7))
                continue
            costs, be = point_costs(pt, report.baselines.get(pt.seed), replace(inputs, K=len(pt.summary.final_soc)))
            cost_rows.append((pt.value, pt.seed, pt.status, costs.C_i, costs.C_e, costs.C_r, costs.C_v2b,
                              pt.summary.q_v2b_kwh, be.frequency, be.verdict))
            if veh is None and pt.status == "complete":
                veh = pt.summary.outage_discharge_by_vehicle
        path = out / "cost.csv"
        _write_csv(path, ["value", "seed", "status", "C_i", "C_e", "C_r", "C_v2b", "q_v2b_kwh",
                          "break_even_per_year", "verdict"], cost_rows)
        written.append(path)
        if veh is not None:
            path = out / "discharge_by_vehicle.dat"
            _write_dat(path, "vehicle discharge_soc (first complete point)", enumerate(veh))
            written.append(path)
    return written
