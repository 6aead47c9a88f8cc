"""Command-line entry point.

Exit codes: 0 success, 1 usage or configuration error, 2 model infeasibility,
3 verification mismatch. The solver backend is chosen with the
``SAEV_SOLVER`` environment variable (``highs`` or ``scipy``).
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from dataclasses import asdict, fields, replace
from pathlib import Path

from . import __version__
from .analytics import AXES, CostInputs, SweepSpec, compare, emit_reports, summarize, sweep
from .config import load_scenario
from .demand import write_arrivals
from .model import assemble, extract_next_state
from .mpc import RunTrace, audit_trace, initial_state, run
from .oracle import OracleRefusal, oracle_solve
from .resilience import break_even_frequency, outage_mask, outage_window, v2b_cost
from .scenario import ScenarioError, validate_scenario
from .solver import SolverUnavailable, solve

EXIT_OK, EXIT_USAGE, EXIT_INFEASIBLE, EXIT_MISMATCH = 0, 1, 2, 3
COST_KEYS = [f.name for f in fields(CostInputs)]


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--scenario", help="scenario TOML file")
    common.add_argument("--out", default=None, help="output directory (default: out)")
    common.add_argument("--seed", type=int, default=None, help="demand seed")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a scenario key, e.g. params.fleet_size=20 (repeatable)")
    common.add_argument("--gap", type=float, default=None, help="relative MIP gap")
    common.add_argument("--time-limit", type=float, default=None, help="per-solve time limit in seconds")
    common.add_argument("--workers", type=int, default=1, help="parallel sweep points")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="saev", description="Shared autonomous EV fleet dispatch with vehicle-to-building support.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    sub.add_parser("ingest", parents=[common], help="build the network and arrival table from raw data")
    sub.add_parser("validate", parents=[common], help="static feasibility diagnostics")
    r = sub.add_parser("run", parents=[common], help="run the receding-horizon controller")
    r.add_argument("--compare", action="store_true",
                   help="also run without outages and report deltas and V2B costs")
    s = sub.add_parser("sweep", parents=[common], help="sensitivity sweep over one axis")
    s.add_argument("--axis", required=True, choices=AXES)
    s.add_argument("--values", required=True, help="comma-separated axis values")
    s.add_argument("--seeds", default="0", help="comma-separated demand seeds (default: 0)")
    c = sub.add_parser("cost", parents=[common], help="V2B cost breakdown and break-even frequency")
    c.add_argument("--normal", help="output directory of a normal run (trace.json)")
    c.add_argument("--emergency", help="output directory of an emergency run (trace.json)")
    sub.add_parser("oracle-check", parents=[common], help="cross-check every MPC iteration against enumeration")
    return p


def _number(text: str):
    try:
        v = float(text)
    except ValueError:
        raise ScenarioError(f"not a number: {text!r}") from None
    return int(v) if v.is_integer() and "." not in text and "e" not in text.lower() else v


def _scenario(args):
    if not args.scenario:
        raise ScenarioError("--scenario is required for this command")
    sc = load_scenario(args.scenario, args.overrides)
    solve_opts = sc.solve
    if args.gap is not None:
        solve_opts = replace(solve_opts, rel_gap=args.gap)
    if args.time_limit is not None:
        solve_opts = replace(solve_opts, time_limit_s=args.time_limit)
    if args.seed is not None:
        sc = replace(sc, demand_seed=args.seed)
    return replace(sc, solve=solve_opts)


def _out(args) -> Path:
    out = Path(args.out or "out")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True, default=str) + "\n")


def cmd_ingest(args) -> int:
    sc = _scenario(args)
    out = _out(args)
    with open(out / "travel_time.csv", "w") as fh:
        for row in sc.net.travel_time:
            fh.write(",".join(str(int(x)) for x in row) + "\n")
    arr = sc.arrivals()
    write_arrivals(out / "arrivals.csv", arr)
    info = {"nodes": sc.net.n, "source": sc.demand_source, "seed": sc.demand_seed,
            "trips": len(sc.trips or []), "arrivals": arr.total, "steps": arr.L}
    _write_json(out / "ingest.json", info)
    print(f"{sc.net.n} nodes, {info['trips']} trips, {arr.total} arrivals over {arr.L} steps -> {out}")
    return EXIT_OK


def cmd_validate(args) -> int:
    sc = _scenario(args)
    rep = validate_scenario(sc.params, sc.net, sc.outages)
    print(rep)
    return EXIT_INFEASIBLE if rep.status == "fail" else EXIT_OK


def _save_run(trace: RunTrace, out: Path, prefix: str = "") -> dict:
    trace.save(out / f"{prefix}trace.json", timings=False)
    trace.write_csv(out, prefix)
    summ = summarize(trace)
    _write_json(out / f"{prefix}summary.json", asdict(summ))
    return asdict(summ)


def cmd_run(args) -> int:
    sc = _scenario(args)
    out = _out(args)
    arr = sc.arrivals()
    trace = run(sc, arr)
    problems = audit_trace(trace, arr, sc.params, sc.net)
    summ = _save_run(trace, out)
    print(f"status {trace.status}: {trace.steps} steps, waiting {summ['total_waiting_min']:.1f} min, "
          f"relocation {summ['total_relocation_min']:.1f} min, q_v2b {summ['q_v2b_kwh']:.2f} kWh")
    if trace.flagged_gaps:
        print(f"steps accepted above the gap target: {trace.flagged_gaps}")
    if problems:
        print("propagation audit failed:\n  " + "\n  ".join(problems), file=sys.stderr)
        return EXIT_MISMATCH
    code = EXIT_OK
    if not trace.complete:
        print(f"infeasible: {trace.diagnostic}", file=sys.stderr)
        code = EXIT_INFEASIBLE
    if args.compare and sc.outages.events:
        normal = run(sc.with_outages(replace(sc.outages, events=())), arr)
        _save_run(normal, out, "normal_")
        delta = compare(summarize(normal), summarize(trace))
        costs = v2b_cost(delta.cost_inputs(K=sc.params.fleet_size, B=sc.params.battery_kwh,
                                           theta_c=sc.params.theta_c, tau_minutes=sc.params.tau_minutes))
        _write_json(out / "delta.json", {**asdict(delta), "costs": asdict(costs)})
        print(f"delta waiting {delta.d_waiting_min:+.1f} min, delta relocation {delta.d_relocation_min:+.1f} min")
    return code


def cmd_sweep(args) -> int:
    sc = _scenario(args)
    values = [_number(v) for v in args.values.split(",") if v.strip()]
    seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    spec = SweepSpec(sc, args.axis, values, seeds)
    report = sweep(spec, workers=args.workers)
    emit_reports(report, _out(args))
    for pt in report.points:
        w = pt.summary.total_waiting_min if pt.summary else math.nan
        print(f"{args.axis}={pt.value} seed={pt.seed}: {pt.status} waiting {w:.1f} min")
    return EXIT_OK


def cmd_cost(args) -> int:
    values = {}
    for text in args.overrides:
        if "=" not in text:
            raise ScenarioError(f"override {text!r} is not key=value")
        key, raw = text.split("=", 1)
        key = key.strip().removeprefix("cost.")
        if key not in COST_KEYS:
            raise ScenarioError(f"unknown cost key {key!r}; known: {', '.join(COST_KEYS)}")
        values[key] = raw.strip().lower() in ("1", "true") if key == "per_step_relocation" else _number(raw)
    if args.normal or args.emergency:
        if not (args.normal and args.emergency):
            raise ScenarioError("--normal and --emergency must be given together")
        n = summarize(RunTrace.load(Path(args.normal) / "trace.json"))
        e = summarize(RunTrace.load(Path(args.emergency) / "trace.json"))
        delta = compare(n, e)
        values.setdefault("T_relo", delta.d_relocation_min)
        values.setdefault("q_v2b", delta.q_v2b_kwh)
    missing = [k for k in ("T_relo", "q_v2b") if k not in values]
    if missing:
        print("cost needs either --normal/--emergency run directories or --set values for: "
              + ", ".join(missing), file=sys.stderr)
        return EXIT_USAGE
    inputs = CostInputs(**values)
    costs = v2b_cost(inputs)
    be = break_even_frequency(costs, inputs.generator_annual)
    for name, val in costs.as_rows():
        print(f"{name:6s} {val:12.2f}")
    print(f"f*     {be.frequency:12.2f}  ({be.verdict})")
    if args.out:
        _write_json(_out(args) / "cost.json", {"inputs": asdict(inputs), "costs": asdict(costs),
                                              "break_even": asdict(be), "flags": inputs.flags})
    return EXIT_OK


def cmd_oracle_check(args) -> int:
    sc = _scenario(args)
    params, net = sc.params, sc.net
    L, T = params.horizon_L, params.horizon_T
    if L == 0:
        print("empty horizon: nothing to check")
        return EXIT_OK
    arr = sc.arrivals()
    state = initial_state(params, net, sc.placement, sc.placement_seed, sc.rates)
    mask = outage_mask(sc.outages, L, net.n)
    relax = sc.emergency_penalty if sc.relax_emergency else None
    gap = sc.solve.rel_gap
    print(f"{'step':>4} {'backend':>14} {'oracle':>14} {'status':>10}  verdict")
    mismatch = False
    for step in range(L):
        horizon = T if sc.terminal == "pad" else min(T, L - step)
        inst = assemble(state, arr.window(step, horizon), outage_window(mask, step, horizon), params,
                        sc.outages, net, start_step=step, relax_penalty=relax)
        try:
            ref = oracle_solve(inst)
        except OracleRefusal as exc:
            print(f"scenario too large for enumeration: {exc}", file=sys.stderr)
            return EXIT_USAGE
        sol = solve(inst, sc.solve)
        if sol.feasible != ref.feasible:
            ok = False
        elif not sol.feasible:
            ok = True
        else:
            ok = abs(sol.objective - ref.objective) <= gap * max(1.0, abs(ref.objective)) + 1e-9
        mismatch |= not ok
        print(f"{step:4d} {sol.objective:14.6f} {ref.objective:14.6f} {sol.status:>10}  "
              f"{'match' if ok else 'MISMATCH'}")
        if not (sol.feasible and ref.feasible):
            break
        state = extract_next_state(inst, sol)
    return EXIT_MISMATCH if mismatch else EXIT_OK


COMMANDS = {
    "ingest": cmd_ingest,
    "validate": cmd_validate,
    "run": cmd_run,
    "sweep": cmd_sweep,
    "cost": cmd_cost,
    "oracle-check": cmd_oracle_check,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ScenarioError, SolverUnavailable, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


def main_entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_entry()
