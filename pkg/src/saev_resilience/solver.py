"""Branch-and-bound backend, MPS exchange files and solve options.

The default backend is HiGHS through ``highspy``. ``SAEV_SOLVER`` selects the
backend (``highs`` or ``scipy``, the latter going through
``scipy.optimize.milp``). MPS output is the free-form dialect: whitespace
separated fields, names without spaces, integer columns wrapped in
``MARKER INTORG/INTEND`` blocks, objective constant written as the negated
RHS of the objective row.
"""

from __future__ import annotations

import logging
import math
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .model import MilpInstance

logger = logging.getLogger(__name__)

BACKEND_ENV = "SAEV_SOLVER"
STATUSES = ("optimal", "gap-feasible", "infeasible", "time-limit", "unbounded", "error")


class SolverUnavailable(RuntimeError):
    pass


@dataclass(frozen=True)
class SolveOptions:
    rel_gap: float = 1e-4
    time_limit_s: float = 3600.0
    threads: int = 1
    seed: int = 0
    verbose: bool = False

    def __post_init__(self):
        if self.rel_gap < 0:
            raise ValueError("rel_gap must be >= 0")
        if self.time_limit_s <= 0:
            raise ValueError("time_limit_s must be > 0")


@dataclass
class Solution:
    status: str
    objective: float = math.nan
    values: np.ndarray | None = None
    bound: float = math.nan
    wall_time: float = 0.0
    backend: str = ""
    info: dict = field(default_factory=dict)

    @property
    def feasible(self) -> bool:
        return self.values is not None and self.status in ("optimal", "gap-feasible", "time-limit")

    @property
    def gap(self) -> float:
        if not self.feasible or math.isnan(self.bound):
            return math.nan
        return abs(self.objective - self.bound) / max(1.0, abs(self.objective))


def _col_name(key) -> str:
    return "_".join(str(p) for p in key)


def row_names(instance: MilpInstance) -> list[str]:
    return [_col_name(k) for k in instance.row_keys]


def col_names(instance: MilpInstance) -> list[str]:
    return [_col_name(k) for k in instance.col_keys]


# --------------------------------------------------------------------------- #
# backends


def _status_from_gap(obj, bound, opts):
    gap = abs(obj - bound) / max(1.0, abs(obj))
    return "optimal" if gap <= opts.rel_gap + 1e-12 else "gap-feasible"


def _solve_highs(instance: MilpInstance, opts: SolveOptions) -> Solution:
    try:
        import highspy
    except ImportError as exc:  # pragma: no cover - depends on environment
        raise SolverUnavailable(
            "highspy is not installed; install it or write the model with export_standard_form() "
            "and solve the MPS file with another solver"
        ) from exc

    h = highspy.Highs()
    h.setOptionValue("output_flag", bool(opts.verbose))
    h.setOptionValue("mip_rel_gap", float(opts.rel_gap))
    h.setOptionValue("time_limit", float(opts.time_limit_s))
    h.setOptionValue("threads", int(opts.threads))
    h.setOptionValue("random_seed", int(opts.seed))

    lp = highspy.HighsLp()
    n, m = instance.n_cols, instance.n_rows
    lp.num_col_ = n
    lp.num_row_ = m
    lp.col_cost_ = instance.c
    lp.offset_ = instance.offset
    lp.col_lower_ = instance.lb
    lp.col_upper_ = instance.ub
    lp.row_lower_ = instance.row_lb
    lp.row_upper_ = instance.row_ub
    csc = sp.csc_matrix(instance.A)
    lp.a_matrix_.format_ = highspy.MatrixFormat.kColwise
    lp.a_matrix_.start_ = csc.indptr
    lp.a_matrix_.index_ = csc.indices
    lp.a_matrix_.value_ = csc.data
    lp.a_matrix_.num_col_ = n
    lp.a_matrix_.num_row_ = m
    if instance.integer.any():
        lp.integrality_ = [highspy.HighsVarType.kInteger if b else highspy.HighsVarType.kContinuous
                           for b in instance.integer]
    h.passModel(lp)
    t0 = time.perf_counter()
    h.run()
    wall = time.perf_counter() - t0
    ms = h.getModelStatus()
    MS = highspy.HighsModelStatus
    info = h.getInfo()
    has_sol = info.primal_solution_status == 2  # feasible
    values = np.array(h.getSolution().col_value) if has_sol else None
    obj = info.objective_function_value if has_sol else math.nan
    is_mip = bool(instance.integer.any())
    bound = info.mip_dual_bound if is_mip else obj
    if ms == MS.kOptimal:
        status = _status_from_gap(obj, bound, opts) if is_mip else "optimal"
    elif ms == MS.kInfeasible:
        status = "infeasible"
    elif ms in (MS.kTimeLimit, MS.kIterationLimit, MS.kSolutionLimit, MS.kInterrupt):
        status = "time-limit"
    elif ms in (MS.kUnbounded, MS.kUnboundedOrInfeasible):
        status = "unbounded" if ms == MS.kUnbounded else "infeasible"
    else:
        status = "error"
    return Solution(status, obj, values, bound, wall, "highs",
                    {"model_status": h.modelStatusToString(ms), "nodes": getattr(info, "mip_node_count", 0)})


def _solve_scipy(instance: MilpInstance, opts: SolveOptions) -> Solution:
    from scipy.optimize import Bounds, LinearConstraint, milp

    cons = [LinearConstraint(instance.A, instance.row_lb, instance.row_ub)] if instance.n_rows else []
    t0 = time.perf_counter()
    res = milp(instance.c, constraints=cons, integrality=instance.integer.astype(int),
               bounds=Bounds(instance.lb, instance.ub),
               options={"mip_rel_gap": opts.rel_gap, "time_limit": opts.time_limit_s, "disp": opts.verbose})
    wall = time.perf_counter() - t0
    values = None if res.x is None else np.asarray(res.x)
    obj = math.nan if values is None else float(res.fun) + instance.offset
    bound = getattr(res, "mip_dual_bound", None)
    bound = obj if bound is None or values is None else float(bound) + instance.offset
    status = {0: "optimal", 1: "time-limit", 2: "infeasible", 3: "unbounded"}.get(res.status, "error")
    if status == "optimal" and instance.integer.any():
        status = _status_from_gap(obj, bound, opts)
    return Solution(status, obj, values, bound, wall, "scipy", {"message": res.message})


BACKENDS = {"highs": _solve_highs, "scipy": _solve_scipy}


def solve(instance: MilpInstance, opts: SolveOptions | None = None, backend: str | None = None) -> Solution:
    """Solve with the configured branch-and-bound backend.

    Infeasibility is reported through ``status`` rather than raised.
    """
    opts = opts or SolveOptions()
    if instance.n_cols == 0:
        feasible = bool(np.all(instance.row_lb <= 0) and np.all(instance.row_ub >= 0))
        if not feasible:
            return Solution("infeasible", backend="none")
        return Solution("optimal", instance.offset, np.zeros(0), instance.offset, 0.0, "none")
    name = (backend or os.environ.get(BACKEND_ENV) or "highs").lower()
    if name not in BACKENDS:
        raise SolverUnavailable(
            f"unknown backend {name!r} (choose from {sorted(BACKENDS)}); "
            "export_standard_form() writes an MPS file for external solvers"
        )
    return BACKENDS[name](instance, opts)


# --------------------------------------------------------------------------- #
# MPS exchange


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def export_standard_form(instance: MilpInstance, path, name: str = "SAEV") -> None:
    """Write the instance as a free-form MPS file.

    Row and column names are the underscore-joined index keys, so the same
    instance always produces the same bytes. Zero coefficients are omitted.
    """
    rnames = row_names(instance)
    cnames = col_names(instance)
    csc = sp.csc_matrix(instance.A)
    csc.sort_indices()
    lines = [f"NAME {name}", "ROWS", " N OBJ"]
    senses = []
    for r, nm in enumerate(rnames):
        lo, hi = instance.row_lb[r], instance.row_ub[r]
        if lo == hi:
            s = "E"
        elif math.isinf(lo) and math.isinf(hi):
            s = "N"
        elif math.isinf(lo):
            s = "L"
        else:
            s = "G"
        senses.append(s)
        lines.append(f" {s} {nm}")
    lines.append("COLUMNS")
    in_int = False
    for j, cn in enumerate(cnames):
        if instance.integer[j] and not in_int:
            lines.append(" MARKER 'MARKER' 'INTORG'")
            in_int = True
        elif not instance.integer[j] and in_int:
            lines.append(" MARKER 'MARKER' 'INTEND'")
            in_int = False
        if instance.c[j] != 0:
            lines.append(f" {cn} OBJ {_fmt(instance.c[j])}")
        for p in range(csc.indptr[j], csc.indptr[j + 1]):
            v = csc.data[p]
            if v != 0:
                lines.append(f" {cn} {rnames[csc.indices[p]]} {_fmt(v)}")
        if instance.c[j] == 0 and not np.any(csc.data[csc.indptr[j]:csc.indptr[j + 1]]):
            lines.append(f" {cn} OBJ 0")  # declares an otherwise empty column
    if in_int:
        lines.append(" MARKER 'MARKER' 'INTEND'")
    lines.append("RHS")
    if instance.offset != 0:
        lines.append(f" RHS OBJ {_fmt(-instance.offset)}")
    ranges = []
    for r, nm in enumerate(rnames):
        lo, hi = instance.row_lb[r], instance.row_ub[r]
        s = senses[r]
        rhs = {"E": lo, "L": hi, "G": lo, "N": 0.0}[s]
        if rhs != 0:
            lines.append(f" RHS {nm} {_fmt(rhs)}")
        if s == "G" and not math.isinf(hi):
            ranges.append(f" RNG {nm} {_fmt(hi - lo)}")
    if ranges:
        lines.append("RANGES")
        lines.extend(ranges)
    lines.append("BOUNDS")
    for j, cn in enumerate(cnames):
        lo, hi = instance.lb[j], instance.ub[j]
        if lo == hi:
            lines.append(f" FX BND {cn} {_fmt(lo)}")
            continue
        if math.isinf(lo) and math.isinf(hi):
            lines.append(f" FR BND {cn}")
            continue
        if math.isinf(lo):
            lines.append(f" MI BND {cn}")
        elif lo != 0 or instance.integer[j]:
            lines.append(f" LO BND {cn} {_fmt(lo)}")
        if not math.isinf(hi):
            lines.append(f" UP BND {cn} {_fmt(hi)}")
        elif instance.integer[j]:
            lines.append(f" PL BND {cn}")
    lines.append("ENDATA")
    try:
        Path(path).write_text("\n".join(lines) + "\n")
    except OSError as exc:
        raise OSError(f"cannot write MPS file {path}: {exc}") from exc


def read_standard_form(path) -> MilpInstance:
    """Parse a free-form MPS file written by :func:`export_standard_form`."""
    rows: dict[str, int] = {}
    senses: list[str] = []
    obj_row = None
    cols: dict[str, int] = {}
    c: list[float] = []
    integer: list[bool] = []
    entries: list[tuple[int, int, float]] = []
    rhs: dict[int, float] = {}
    rng: dict[int, float] = {}
    bounds: dict[int, list] = {}
    offset = 0.0
    section = None
    in_int = False
    for raw in Path(path).read_text().splitlines():
        if not raw.strip() or raw.startswith("*"):
            continue
        if not raw[0].isspace():
            section = raw.split()[0]
            continue
        f = raw.split()
        if section == "ROWS":
            s, nm = f
            if s == "N" and obj_row is None:
                obj_row = nm
                continue
            rows[nm] = len(senses)
            senses.append(s)
        elif section == "COLUMNS":
            if len(f) >= 3 and f[1] == "'MARKER'":
                in_int = f[2] == "'INTORG'"
                continue
            cn = f[0]
            if cn not in cols:
                cols[cn] = len(c)
                c.append(0.0)
                integer.append(in_int)
            j = cols[cn]
            for rn, val in zip(f[1::2], f[2::2]):
                if rn == obj_row:
                    c[j] += float(val)
                else:
                    entries.append((rows[rn], j, float(val)))
        elif section == "RHS":
            for rn, val in zip(f[1::2], f[2::2]):
                if rn == obj_row:
                    offset = -float(val)
                else:
                    rhs[rows[rn]] = float(val)
        elif section == "RANGES":
            for rn, val in zip(f[1::2], f[2::2]):
                rng[rows[rn]] = float(val)
        elif section == "BOUNDS":
            kind, cn = f[0], f[2]
            bounds.setdefault(cols[cn], []).append((kind, float(f[3]) if len(f) > 3 else None))
    n, m = len(c), len(senses)
    lb = np.zeros(n)
    ub = np.full(n, np.inf)
    for j, items in bounds.items():
        for kind, val in items:
            if kind == "FX":
                lb[j] = ub[j] = val
            elif kind == "FR":
                lb[j], ub[j] = -np.inf, np.inf
            elif kind == "MI":
                lb[j] = -np.inf
            elif kind == "PL":
                ub[j] = np.inf
            elif kind == "LO":
                lb[j] = val
            elif kind == "UP":
                ub[j] = val
            elif kind == "BV":
                lb[j], ub[j] = 0.0, 1.0
    row_lb = np.full(m, -np.inf)
    row_ub = np.full(m, np.inf)
    for r, s in enumerate(senses):
        b = rhs.get(r, 0.0)
        if s == "E":
            row_lb[r] = row_ub[r] = b
        elif s == "L":
            row_ub[r] = b
            if r in rng:
                row_lb[r] = b - abs(rng[r])
        elif s == "G":
            row_lb[r] = b
            if r in rng:
                row_ub[r] = b + abs(rng[r])
    if entries:
        ri, ci, vv = zip(*entries)
    else:
        ri, ci, vv = (), (), ()
    A = sp.csr_matrix((vv, (ri, ci)), shape=(m, n))
    rnames = sorted(rows, key=rows.get)
    cnames = sorted(cols, key=cols.get)
    return MilpInstance(A, row_lb, row_ub, [(r,) for r in rnames], np.array(c), lb, ub,
                        np.array(integer, dtype=bool), [(cn,) for cn in cnames], offset)
