"""One prediction-horizon MILP of the SAEV fleet with V2B discharge.

Column families, all indexed over prediction steps ``t in [0, T)``:

    d[i, j, t]        waiting passengers i -> j (continuous, i != j)
    a[k, i, th, t]    vehicle k is ``th`` steps from reaching node i (binary)
    u[k, i, t]        vehicle k parked at node i (binary)
    gamma[k, t]       state of charge
    e[k, t], g[k, t]  charge / V2B discharge, SOC units per step
    v[k, i, j, t]     vehicle k starts carrying a passenger i -> j (binary)
    r[k, i, j, t]     vehicle k starts relocating empty i -> j (binary)
    slack[t]          only when the emergency cover is relaxed

The building intake ``q_t = eta * sum_k g[k, t]`` is substituted into the
emergency-cover rows instead of being a column. State transitions exist for
``t < T - 1``; the controls of the last step are tied to an implicit
successor state by closure rows (departures need a vehicle present, SOC
after the step stays in bounds).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .scenario import ModelParams, Network, OutageSchedule

INT_TOL = 1e-5
ROUND_TOL = 0.1  # extraction rounds binaries at 0.5 and rejects values further than this from 0/1
SOC_SNAP = 1e-7
MAX_COLUMNS = 2**31 - 1

# test-only constraint mutations, e.g. {"flip_pickup_limit"}
_MUTATIONS: set[str] = set()


class ModelError(ValueError):
    """Inconsistent model input or extracted solution."""


class ExtractionError(ModelError):
    def __init__(self, message: str, status: str | None = None):
        self.status = status
        super().__init__(message if status is None else f"{message} (solver status: {status})")


# --------------------------------------------------------------------------- #
# state and controls


@dataclass(eq=False)
class FleetState:
    """Snapshot at a real-time step.

    ``A[k, i, th]`` is padded to the largest remaining-steps index over all
    nodes; entries with ``th`` above node i's own maximum are always zero.
    """

    D: np.ndarray  # (N, N) int
    U: np.ndarray  # (K, N) int
    A: np.ndarray  # (K, N, max_theta + 1) int
    Gamma: np.ndarray  # (K,) float

    def __post_init__(self):
        self.D = np.asarray(self.D, dtype=np.int64)
        self.U = np.asarray(self.U, dtype=np.int64)
        self.A = np.asarray(self.A, dtype=np.int64)
        self.Gamma = np.asarray(self.Gamma, dtype=float)

    @property
    def K(self) -> int:
        return self.U.shape[0]

    @property
    def N(self) -> int:
        return self.U.shape[1]

    def copy(self) -> "FleetState":
        return FleetState(self.D.copy(), self.U.copy(), self.A.copy(), self.Gamma.copy())

    def location(self, k: int) -> tuple:
        """``("parked", i)`` or ``("moving", i, theta)`` for vehicle k."""
        parked = np.flatnonzero(self.U[k])
        if parked.size:
            return ("parked", int(parked[0]))
        i, th = np.argwhere(self.A[k])[0]
        return ("moving", int(i), int(th))

    def node_of(self, k: int) -> int:
        return self.location(k)[1]

    def check(self, params: ModelParams | None = None, net: Network | None = None) -> None:
        """Raise ModelError when the snapshot breaks a fleet-state invariant."""
        K, N = self.U.shape
        if self.D.shape != (N, N) or self.A.shape[:2] != (K, N) or self.Gamma.shape != (K,):
            raise ModelError(
                f"inconsistent state shapes D{self.D.shape} U{self.U.shape} A{self.A.shape} Gamma{self.Gamma.shape}"
            )
        if np.any(self.D < 0):
            raise ModelError("negative waiting passengers")
        for name, arr in (("U", self.U), ("A", self.A)):
            if np.any((arr != 0) & (arr != 1)):
                raise ModelError(f"{name} flags must be binary")
        total = self.U.sum(axis=1) + self.A.sum(axis=(1, 2))
        bad = np.flatnonzero(total != 1)
        if bad.size:
            raise ModelError(f"vehicles {bad.tolist()} are not in exactly one place")
        if net is not None:
            if N != net.n:
                raise ModelError(f"state has {N} nodes, network has {net.n}")
            for i, mt in enumerate(net.max_thetas):
                if np.any(self.A[:, i, mt + 1:]):
                    raise ModelError(f"in-transit index beyond range at node {i}")
        if params is not None:
            parked = self.U.sum(axis=1) == 1
            g = self.Gamma[parked]
            if np.any(g < params.gamma_min - 1e-7) or np.any(g > params.gamma_max + 1e-7):
                raise ModelError("parked vehicle SOC outside [gamma_min, gamma_max]")

    @classmethod
    def parked(cls, nodes, n_nodes: int, soc, max_theta: int = 0) -> "FleetState":
        nodes = list(nodes)
        K = len(nodes)
        U = np.zeros((K, n_nodes), dtype=np.int64)
        U[np.arange(K), nodes] = 1
        soc = np.broadcast_to(np.asarray(soc, dtype=float), (K,)).copy()
        return cls(np.zeros((n_nodes, n_nodes)), U, np.zeros((K, n_nodes, max_theta + 1)), soc)

    def to_dict(self) -> dict:
        return {
            "D": self.D.tolist(),
            "U": self.U.tolist(),
            "A": self.A.tolist(),
            "Gamma": [float(x) for x in self.Gamma],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FleetState":
        return cls(np.array(d["D"]), np.array(d["U"]), np.array(d["A"]), np.array(d["Gamma"]))


@dataclass(eq=False)
class ControlSet:
    """First-step controls applied at one real-time step."""

    pickups: set = field(default_factory=set)  # (k, i, j)
    relocations: set = field(default_factory=set)  # (k, i, j)
    charge: np.ndarray = field(default_factory=lambda: np.zeros(0))
    discharge: np.ndarray = field(default_factory=lambda: np.zeros(0))
    delivered: float = 0.0
    slack: float = 0.0

    @property
    def empty(self) -> bool:
        return (not self.pickups and not self.relocations and not np.any(self.charge)
                and not np.any(self.discharge))

    def departures(self):
        for k, i, j in sorted(self.pickups):
            yield k, i, j, "v"
        for k, i, j in sorted(self.relocations):
            yield k, i, j, "r"

    def check(self, eta: float) -> None:
        movers = [k for k, _, _ in self.pickups] + [k for k, _, _ in self.relocations]
        dup = sorted({k for k in movers if movers.count(k) > 1})
        if dup:
            raise ExtractionError(f"vehicles {dup} assigned more than one task")
        both = np.flatnonzero((self.charge > 0) & (self.discharge > 0))
        if both.size:
            raise ExtractionError(f"vehicles {both.tolist()} charge and discharge simultaneously")
        if abs(self.delivered - eta * float(np.sum(self.discharge))) > 1e-9:
            raise ExtractionError("delivered energy does not equal eta * total discharge")

    def to_dict(self) -> dict:
        return {
            "pickups": sorted(list(map(list, self.pickups))),
            "relocations": sorted(list(map(list, self.relocations))),
            "charge": [float(x) for x in self.charge],
            "discharge": [float(x) for x in self.discharge],
            "delivered": float(self.delivered),
            "slack": float(self.slack),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ControlSet":
        return cls(
            {tuple(x) for x in d["pickups"]},
            {tuple(x) for x in d["relocations"]},
            np.array(d["charge"], dtype=float),
            np.array(d["discharge"], dtype=float),
            float(d["delivered"]),
            float(d.get("slack", 0.0)),
        )


# --------------------------------------------------------------------------- #
# column layout


@dataclass(eq=False)
class VariableLayout:
    N: int
    K: int
    T: int
    max_thetas: tuple[int, ...]
    d: np.ndarray
    a: np.ndarray
    u: np.ndarray
    gamma: np.ndarray
    e: np.ndarray
    g: np.ndarray
    v: np.ndarray
    r: np.ndarray
    slack: np.ndarray
    counts: dict
    n_cols: int

    @property
    def families(self):
        return ("d", "a", "u", "gamma", "e", "g", "v", "r", "slack")

    def column_keys(self) -> list[tuple]:
        """``(family, *subscripts)`` for every column, in column order."""
        keys: list = [None] * self.n_cols
        for fam in self.families:
            arr = getattr(self, fam)
            for idx in zip(*np.nonzero(arr >= 0)):
                keys[arr[idx]] = (fam, *map(int, idx))
        return keys


def index_variables(N: int, K: int, T: int, net: Network | None = None,
                    relax_emergency: bool = False) -> VariableLayout:
    """Assign column ids to every variable family; ``-1`` marks absent combos."""
    if min(N, K, T) < 1:
        raise ModelError(f"dimensions must be positive, got N={N} K={K} T={T}")
    mts = net.max_thetas if net is not None else (0,) * N
    if len(mts) != N:
        raise ModelError(f"network has {len(mts)} nodes, expected {N}")
    th_max = max(mts)
    off = ~np.eye(N, dtype=bool)

    est = (N * N * T + K * N * (th_max + 1) * T + K * N * T + 3 * K * T + 2 * K * N * N * T + T)
    if est > MAX_COLUMNS:
        raise ModelError(f"column index space overflows for N={N} K={K} T={T} (max theta {th_max})")

    nxt = 0
    counts = {}

    def alloc(name, mask):
        nonlocal nxt
        arr = np.full(mask.shape, -1, dtype=np.int64)
        n = int(mask.sum())
        arr[mask] = np.arange(nxt, nxt + n)
        nxt += n
        counts[name] = n
        return arr

    d = alloc("d", np.broadcast_to(off[:, :, None], (N, N, T)).copy())
    th_mask = np.arange(th_max + 1)[None, :] <= np.asarray(mts)[:, None]  # (N, th)
    a = alloc("a", np.broadcast_to(th_mask[None, :, :, None], (K, N, th_max + 1, T)).copy())
    u = alloc("u", np.ones((K, N, T), dtype=bool))
    gamma = alloc("gamma", np.ones((K, T), dtype=bool))
    e = alloc("e", np.ones((K, T), dtype=bool))
    g = alloc("g", np.ones((K, T), dtype=bool))
    vr_mask = np.broadcast_to(off[None, :, :, None], (K, N, N, T)).copy()
    v = alloc("v", vr_mask)
    r = alloc("r", vr_mask)
    slack = alloc("slack", np.full(T, relax_emergency, dtype=bool))
    return VariableLayout(N, K, T, tuple(mts), d, a, u, gamma, e, g, v, r, slack, counts, nxt)


# --------------------------------------------------------------------------- #
# instance


@dataclass(frozen=True, eq=False)
class AmodProblem:
    """The data one instance was assembled from (read by the oracle)."""

    state: FleetState
    arrivals: np.ndarray  # (N, N, T)
    outage: np.ndarray  # (N, T) 0/1
    requirement: np.ndarray  # (T,) SOC per step
    params: ModelParams
    net: Network
    start_step: int
    prices: np.ndarray  # (T,)
    relax_penalty: float | None


@dataclass(eq=False)
class MilpInstance:
    """Minimisation ``c @ x + offset`` subject to ``row_lb <= A x <= row_ub``."""

    A: sp.csr_matrix
    row_lb: np.ndarray
    row_ub: np.ndarray
    row_keys: list
    c: np.ndarray
    lb: np.ndarray
    ub: np.ndarray
    integer: np.ndarray
    col_keys: list
    offset: float = 0.0
    layout: VariableLayout | None = None
    problem: AmodProblem | None = None

    def __post_init__(self):
        self._col_index = None

    @property
    def n_cols(self) -> int:
        return len(self.c)

    @property
    def n_rows(self) -> int:
        return self.A.shape[0]

    def column(self, *key) -> int:
        """Column id for ``(family, *subscripts)``."""
        if self._col_index is None:
            self._col_index = {k: i for i, k in enumerate(self.col_keys)}
        return self._col_index[tuple(key)]

    def objective_value(self, x) -> float:
        return float(self.c @ np.asarray(x, dtype=float) + self.offset)

    def max_violation(self, x) -> float:
        x = np.asarray(x, dtype=float)
        ax = self.A @ x
        viol = max(
            float(np.max(self.row_lb - ax, initial=0.0)),
            float(np.max(ax - self.row_ub, initial=0.0)),
            float(np.max(self.lb - x, initial=0.0)),
            float(np.max(x - self.ub, initial=0.0)),
        )
        frac = np.abs(x[self.integer] - np.round(x[self.integer]))
        return max(viol, float(np.max(frac, initial=0.0)))

    @classmethod
    def from_dense(cls, c, A=None, row_lb=None, row_ub=None, lb=None, ub=None, integer=None,
                   offset: float = 0.0, names=None) -> "MilpInstance":
        """Generic instance from plain arrays (handy for small tests)."""
        c = np.asarray(c, dtype=float)
        n = len(c)
        A = sp.csr_matrix(np.zeros((0, n)) if A is None else np.atleast_2d(np.asarray(A, dtype=float)))
        m = A.shape[0]
        row_lb = np.full(m, -np.inf) if row_lb is None else np.asarray(row_lb, dtype=float)
        row_ub = np.full(m, np.inf) if row_ub is None else np.asarray(row_ub, dtype=float)
        lb = np.zeros(n) if lb is None else np.asarray(lb, dtype=float)
        ub = np.full(n, np.inf) if ub is None else np.asarray(ub, dtype=float)
        integer = np.zeros(n, dtype=bool) if integer is None else np.asarray(integer, dtype=bool)
        names = names or [f"x{i}" for i in range(n)]
        return cls(A, row_lb, row_ub, [(f"c{r}",) for r in range(m)], c, lb, ub, integer,
                   [(nm,) for nm in names], offset)


class _Rows:
    def __init__(self):
        self.ri: list[int] = []
        self.ci: list[int] = []
        self.val: list[float] = []
        self.lb: list[float] = []
        self.ub: list[float] = []
        self.keys: list[tuple] = []

    def add(self, key, cols, vals, lo=-np.inf, hi=np.inf):
        r = len(self.lb)
        self.ri.extend([r] * len(cols))
        self.ci.extend(cols)
        self.val.extend(vals)
        self.lb.append(lo)
        self.ub.append(hi)
        self.keys.append(key)

    def matrix(self, n_cols):
        A = sp.coo_matrix((self.val, (self.ri, self.ci)), shape=(len(self.lb), n_cols)).tocsr()
        A.sum_duplicates()
        A.eliminate_zeros()
        return A


def _validate_inputs(state: FleetState, arrivals, outage_window, net: Network):
    N = net.n
    if state.N != N:
        raise ModelError(f"state has {state.N} nodes but the network has {N}")
    if state.A.shape[2] < max(net.max_thetas) + 1:
        pad = max(net.max_thetas) + 1 - state.A.shape[2]
        state = FleetState(state.D, state.U, np.pad(state.A, ((0, 0), (0, 0), (0, pad))), state.Gamma)
    if arrivals.shape[:2] != (N, N):
        raise ModelError(f"arrival window shape {arrivals.shape} does not match {N} nodes")
    if outage_window.shape[0] != N:
        raise ModelError(f"outage window shape {outage_window.shape} does not match {N} nodes")
    if arrivals.shape[2] != outage_window.shape[1]:
        raise ModelError("arrival and outage windows differ in length")
    return state


def assemble(state: FleetState, arrivals_window, outage_window, params: ModelParams,
             outage: OutageSchedule, net: Network, start_step: int = 0,
             relax_penalty: float | None = None) -> MilpInstance:
    """Build the horizon MILP for the given initial state and forecast windows.

    Args:
        state: fleet snapshot fixed as the t = 0 values.
        arrivals_window: ``(N, N, T)`` passenger arrivals per prediction step.
        outage_window: ``(N, T)`` 0/1 outage flags per prediction step.
        params: model parameters; the fleet size is taken from ``state``.
        outage: supplies the per-step building requirement ``Q_d - Q_m``.
        net: travel times.
        start_step: absolute step of t = 0 (indexes the price schedule).
        relax_penalty: when set, the emergency cover gets a penalised slack.
    """
    P = np.asarray(arrivals_window, dtype=float)
    out = np.asarray(outage_window, dtype=np.int64)
    state = _validate_inputs(state, P, out, net)
    state.check(net=net)
    N, K, T = net.n, state.K, P.shape[2]
    L = index_variables(N, K, T, net, relax_emergency=relax_penalty is not None)
    tt = net.travel_time
    mts = net.max_thetas
    prices = np.array([params.price_at(start_step + t) for t in range(T)])
    req = outage.requirement * out.sum(axis=0).astype(float)

    n = L.n_cols
    lb = np.zeros(n)
    ub = np.full(n, np.inf)
    integer = np.zeros(n, dtype=bool)
    for fam in ("a", "u", "v", "r"):
        cols = getattr(L, fam)
        cols = cols[cols >= 0]
        ub[cols] = 1.0
        integer[cols] = True

    # initial conditions
    for i in range(N):
        for j in range(N):
            if i != j:
                c = L.d[i, j, 0]
                lb[c] = ub[c] = state.D[i, j]
    for k in range(K):
        for i in range(N):
            c = L.u[k, i, 0]
            lb[c] = ub[c] = state.U[k, i]
            for th in range(mts[i] + 1):
                c = L.a[k, i, th, 0]
                lb[c] = ub[c] = state.A[k, i, th]
        c = L.gamma[k, 0]
        lb[c] = ub[c] = state.Gamma[k]

    rows = _Rows()
    eta = params.eta
    mut = _MUTATIONS

    # queue recursion
    for t in range(T - 1):
        for i in range(N):
            for j in range(N):
                if i == j:
                    continue
                cols = [L.d[i, j, t + 1], L.d[i, j, t]] + [L.v[k, i, j, t] for k in range(K)]
                vals = [1.0, -1.0] + [1.0] * K
                rows.add(("queue", i, j, t), cols, vals, P[i, j, t], P[i, j, t])

    # movement automaton: arrivals into node i with th steps left
    inbound = {(i, th): [j for j in range(N) if j != i and tt[j, i] - 1 == th]
               for i in range(N) for th in range(mts[i] + 1)}
    for t in range(T - 1):
        for k in range(K):
            for i in range(N):
                for th in range(mts[i] + 1):
                    cols = [L.a[k, i, th, t + 1]]
                    vals = [1.0]
                    if th < mts[i]:
                        cols.append(L.a[k, i, th + 1, t])
                        vals.append(-1.0)
                    for j in inbound[(i, th)]:
                        cols += [L.v[k, j, i, t], L.r[k, j, i, t]]
                        vals += [-1.0, -1.0]
                    rows.add(("move", k, i, th, t), cols, vals, 0.0, 0.0)

    # parking recursion and last-step departure closure
    for t in range(T):
        for k in range(K):
            for i in range(N):
                outs = [c for j in range(N) if j != i for c in (L.v[k, i, j, t], L.r[k, i, j, t])]
                if t < T - 1:
                    cols = [L.u[k, i, t + 1], L.u[k, i, t], L.a[k, i, 0, t]] + outs
                    vals = [1.0, -1.0, -1.0] + [1.0] * len(outs)
                    rows.add(("park", k, i, t), cols, vals, 0.0, 0.0)
                else:
                    cols = [L.u[k, i, t], L.a[k, i, 0, t]] + outs
                    vals = [1.0, 1.0] + [-1.0] * len(outs)
                    rows.add(("park_close", k, i, t), cols, vals, 0.0, np.inf)

    def moving_next(k, t):
        """Columns/coefs of sum_i,th a[k, i, th, t+1] expressed via step-t columns."""
        cols, vals = [], []
        for i in range(N):
            for th in range(1, mts[i] + 1):
                cols.append(L.a[k, i, th, t])
                vals.append(1.0)
            for j in range(N):
                if j != i:
                    cols += [L.v[k, i, j, t], L.r[k, i, j, t]]
                    vals += [1.0, 1.0]
        return cols, vals

    # SOC recursion and last-step closure
    for t in range(T):
        for k in range(K):
            if t < T - 1:
                cols = [L.gamma[k, t + 1], L.gamma[k, t], L.e[k, t], L.g[k, t]]
                vals = [1.0, -1.0, -1.0, 1.0]
                for i in range(N):
                    for th in range(mts[i] + 1):
                        cols.append(L.a[k, i, th, t + 1])
                        vals.append(params.theta_d)
                rows.add(("soc", k, t), cols, vals, 0.0, 0.0)
            else:
                mc, mv = moving_next(k, t)
                cols = [L.gamma[k, t], L.e[k, t], L.g[k, t]] + mc
                vals = [1.0, 1.0, -1.0] + [-params.theta_d * x for x in mv]
                rows.add(("soc_close", k, t), cols, vals, params.gamma_min, params.gamma_max)

    # one place per vehicle
    for t in range(T):
        for k in range(K):
            cols = [L.u[k, i, t] for i in range(N)]
            cols += [L.a[k, i, th, t] for i in range(N) for th in range(mts[i] + 1)]
            rows.add(("onehot", k, t), cols, [1.0] * len(cols), 1.0, 1.0)

    # single task (parking at t+1 counted together with departures at t)
    for t in range(T - 1):
        for k in range(K):
            cols, vals = [], []
            for i in range(N):
                cols.append(L.u[k, i, t + 1])
                vals.append(1.0)
                for j in range(N):
                    if j != i:
                        cols += [L.v[k, i, j, t], L.r[k, i, j, t]]
                        vals += [1.0, 1.0]
            rows.add(("task", k, t), cols, vals, -np.inf, 1.0)

    # pickups limited by waiting plus arriving passengers
    for t in range(T):
        for i in range(N):
            for j in range(N):
                if i == j:
                    continue
                cols = [L.v[k, i, j, t] for k in range(K)] + [L.d[i, j, t]]
                vals = [1.0] * K + [-1.0]
                if "flip_pickup_limit" in mut:
                    rows.add(("pickup", i, j, t), cols, vals, P[i, j, t], np.inf)
                else:
                    rows.add(("pickup", i, j, t), cols, vals, -np.inf, P[i, j, t])

    # SOC cap and floor with trip reservation
    for t in range(T):
        for k in range(K):
            rows.add(("soc_max", k, t), [L.gamma[k, t]], [1.0], -np.inf, params.gamma_max)
            rows.add(("soc_min", k, t), [L.gamma[k, t]], [1.0], params.gamma_min, np.inf)
            for i in range(N):
                for j in range(N):
                    if i == j:
                        continue
                    c = params.theta_d * tt[i, j]
                    rows.add(("soc_trip", k, i, j, t), [L.gamma[k, t], L.v[k, i, j, t], L.r[k, i, j, t]],
                             [1.0, -c, -c], params.gamma_min, np.inf)

    # charging only parked at powered nodes, discharging only parked at outage nodes
    for t in range(T):
        for k in range(K):
            cols = [L.e[k, t]] + [L.u[k, i, t] for i in range(N) if not out[i, t]]
            rows.add(("charge", k, t), cols, [1.0] + [-params.theta_c] * (len(cols) - 1), -np.inf, 0.0)
            cols = [L.g[k, t]] + [L.u[k, i, t] for i in range(N) if out[i, t]]
            rows.add(("discharge", k, t), cols, [1.0] + [-params.theta_v2b] * (len(cols) - 1), -np.inf, 0.0)

    # emergency cover: eta * sum_k g >= requirement
    for t in range(T):
        if req[t] > 0:
            cols = [L.g[k, t] for k in range(K)]
            vals = [eta] * K
            if relax_penalty is not None:
                cols.append(L.slack[t])
                vals.append(1.0)
            rows.add(("cover", t), cols, vals, req[t], np.inf)

    # objective
    c = np.zeros(n)
    c[L.d[L.d >= 0]] = 1.0
    for t in range(T):
        for i in range(N):
            for j in range(N):
                if i != j:
                    c[L.r[:, i, j, t]] = params.rho1 * tt[i, j]
        c[L.e[:, t]] = params.rho2 * prices[t]
        c[L.g[:, t]] = params.rho2 * (params.omega - eta * prices[t])
        if relax_penalty is not None:
            c[L.slack[t]] = relax_penalty

    problem = AmodProblem(state, P, out, req, params, net, start_step, prices, relax_penalty)
    return MilpInstance(
        rows.matrix(n), np.array(rows.lb), np.array(rows.ub), rows.keys, c, lb, ub, integer,
        L.column_keys(), 0.0, L, problem,
    )


# --------------------------------------------------------------------------- #
# solution read-back


def _values(solution):
    status = getattr(solution, "status", "optimal")
    if status not in ("optimal", "gap-feasible", "time-limit") or getattr(solution, "values", solution) is None:
        raise ExtractionError("no feasible solution to extract", status)
    return np.asarray(getattr(solution, "values", solution), dtype=float)


def _binary(x):
    return (x > 0.5).astype(np.int64)


def _clean_rate(x, cap):
    x = float(x)
    if x < SOC_SNAP:
        return 0.0
    if x > cap - SOC_SNAP:
        return float(cap)
    return x


def stage_cost(state: FleetState, controls: ControlSet, params: ModelParams, net: Network, step: int) -> float:
    """Objective contribution of one step: waiting + rho1 relocation + rho2 energy."""
    price = params.price_at(step)
    wait = float(state.D.sum())
    relo = float(sum(net.travel_time[i, j] for _, i, j in controls.relocations))
    e = float(np.sum(controls.charge))
    g = float(np.sum(controls.discharge))
    energy = (e - params.eta * g) * price + params.omega * g
    return wait + params.rho1 * relo + params.rho2 * energy


def extract_controls(instance: MilpInstance, solution) -> ControlSet:
    """Rounded first-step controls of a solved instance."""
    x = _values(solution)
    L, pb = instance.layout, instance.problem
    if L is None or pb is None:
        raise ExtractionError("instance carries no AMoD layout")
    frac = np.abs(x[instance.integer] - np.round(x[instance.integer]))
    if frac.size and frac.max() > ROUND_TOL:
        raise ExtractionError(f"integrality violated by {frac.max():.3g}")
    K, N = L.K, L.N
    params = pb.params
    pickups, relocs = set(), set()
    for k in range(K):
        for i in range(N):
            for j in range(N):
                if i == j:
                    continue
                if x[L.v[k, i, j, 0]] > 0.5:
                    pickups.add((k, i, j))
                if x[L.r[k, i, j, 0]] > 0.5:
                    relocs.add((k, i, j))
    charge = np.array([_clean_rate(x[L.e[k, 0]], params.theta_c) for k in range(K)])
    discharge = np.array([_clean_rate(x[L.g[k, 0]], params.theta_v2b) for k in range(K)])
    slack = float(x[L.slack[0]]) if L.slack[0] >= 0 else 0.0

    u0 = _binary(x[L.u[:, :, 0]])
    a0 = np.zeros((K, N), dtype=np.int64)
    for k in range(K):
        for i in range(N):
            a0[k, i] = sum(_binary(x[L.a[k, i, th, 0]]) for th in range(L.max_thetas[i] + 1))
    if np.any(u0.sum(axis=1) + a0.sum(axis=1) != 1):
        raise ExtractionError("rounded solution breaks the one-place-per-vehicle constraint")
    ctl = ControlSet(pickups, relocs, charge, discharge, params.eta * float(discharge.sum()), slack)
    ctl.check(params.eta)
    return ctl


def _snap_soc(x, params: ModelParams):
    if abs(x - params.gamma_min) < SOC_SNAP:
        return params.gamma_min
    if abs(x - params.gamma_max) < SOC_SNAP:
        return params.gamma_max
    return x


def propagate(state: FleetState, controls: ControlSet, arrivals_now, params: ModelParams,
              net: Network) -> FleetState:
    """Apply one step of the queue, movement, parking and SOC recursions."""
    N, K = state.N, state.K
    mts = net.max_thetas
    D = state.D + np.asarray(arrivals_now, dtype=np.int64)
    for _, i, j in controls.pickups:
        D[i, j] -= 1
    U = state.U.copy()
    A = np.zeros_like(state.A)
    depart = {}
    for k, i, j, _ in controls.departures():
        depart[k] = (i, j)
    for k in range(K):
        # shift in-transit vehicles one step closer; th = 0 arrives and parks
        for i in range(N):
            for th in range(1, mts[i] + 1):
                if state.A[k, i, th]:
                    A[k, i, th - 1] = 1
            if state.A[k, i, 0]:
                U[k, i] += 1
        if k in depart:
            i, j = depart[k]
            U[k, i] -= 1
            A[k, j, net.travel_time[i, j] - 1] = 1
    if np.any((U < 0) | (U > 1)) or np.any(D < 0):
        raise ModelError("controls are inconsistent with the state they are applied to")
    moving = A.sum(axis=(1, 2))
    Gamma = state.Gamma + controls.charge - controls.discharge - params.theta_d * moving
    Gamma = np.array([_snap_soc(g, params) for g in Gamma])
    return FleetState(D, U, A, Gamma)


def extract_next_state(instance: MilpInstance, solution) -> FleetState:
    """State at prediction step 1, taken from the solution values.

    SOC is re-evaluated from its recursion with the cleaned first-step rates
    so solver round-off does not leak into the next instance.
    """
    x = _values(solution)
    L, pb = instance.layout, instance.problem
    if L is None or pb is None:
        raise ExtractionError("instance carries no AMoD layout")
    params, net = pb.params, pb.net
    ctl = extract_controls(instance, solution)
    if L.T == 1:
        nxt = propagate(pb.state, ctl, pb.arrivals[:, :, 0].round().astype(np.int64), params, net)
        nxt.check(params, net)
        return nxt
    N, K = L.N, L.K
    D = np.zeros((N, N), dtype=np.int64)
    for i in range(N):
        for j in range(N):
            if i != j:
                val = x[L.d[i, j, 1]]
                D[i, j] = int(round(val))
                if abs(val - D[i, j]) > 1e-4 and np.allclose(pb.arrivals, np.round(pb.arrivals)):
                    raise ExtractionError(f"waiting count d[{i},{j},1]={val} is not integral")
    U = _binary(x[L.u[:, :, 1]])
    A = np.zeros_like(pb.state.A)
    for k in range(K):
        for i in range(N):
            for th in range(L.max_thetas[i] + 1):
                A[k, i, th] = int(x[L.a[k, i, th, 1]] > 0.5)
    moving = A.sum(axis=(1, 2))
    Gamma = pb.state.Gamma + ctl.charge - ctl.discharge - params.theta_d * moving
    for k in range(K):
        solver_val = x[L.gamma[k, 1]]
        if abs(solver_val - Gamma[k]) > 1e-5:
            raise ExtractionError(f"vehicle {k}: SOC {solver_val} disagrees with recursion {Gamma[k]}")
    Gamma = np.array([_snap_soc(g, params) for g in Gamma])
    nxt = FleetState(D, U, A, Gamma)
    try:
        nxt.check(params, net)
    except ModelError as exc:
        raise ExtractionError(f"extracted next state is invalid: {exc}") from None
    return nxt


def objective_terms(instance: MilpInstance, x) -> dict:
    """Per-step waiting, relocation and energy terms recomputed from column values."""
    L, pb = instance.layout, instance.problem
    x = np.asarray(x, dtype=float)
    params, tt = pb.params, pb.net.travel_time
    T = L.T
    wait = np.array([x[L.d[:, :, t][L.d[:, :, t] >= 0]].sum() for t in range(T)])
    relo = np.zeros(T)
    energy = np.zeros(T)
    for t in range(T):
        for i in range(L.N):
            for j in range(L.N):
                if i != j:
                    relo[t] += tt[i, j] * x[L.r[:, i, j, t]].sum()
        e = x[L.e[:, t]]
        g = x[L.g[:, t]]
        energy[t] = float(np.sum((e - params.eta * g) * pb.prices[t] + params.omega * g))
    slack = np.array([x[L.slack[t]] if L.slack[t] >= 0 else 0.0 for t in range(T)])
    total = wait.sum() + params.rho1 * relo.sum() + params.rho2 * energy.sum()
    if pb.relax_penalty is not None:
        total += pb.relax_penalty * slack.sum()
    return {"waiting": wait, "relocation": relo, "energy": energy, "slack": slack, "total": float(total)}


def solution_violations(instance: MilpInstance, x, tol: float = 1e-6) -> list[str]:
    """Check a column vector against the fleet rules without reading the matrix.

    Covers the one-place rule, integrality, SOC bounds, charge/discharge
    locality and rates, the emergency cover and the queue recursion. Returns
    human-readable messages; an empty list means the solution is sound.
    """
    L, pb = instance.layout, instance.problem
    x = np.asarray(x, dtype=float)
    p, out, P = pb.params, pb.outage, pb.arrivals
    N, K, T = L.N, L.K, L.T
    msgs = []
    frac = np.abs(x[instance.integer] - np.round(x[instance.integer]))
    if frac.size and frac.max() > INT_TOL:
        msgs.append(f"integrality off by {frac.max():.3g}")
    for t in range(T):
        g_sum = 0.0
        for k in range(K):
            u = x[L.u[k, :, t]]
            a = sum(x[L.a[k, i, th, t]] for i in range(N) for th in range(L.max_thetas[i] + 1))
            if abs(u.sum() + a - 1) > tol:
                msgs.append(f"vehicle {k} step {t}: in {u.sum() + a:.6g} places")
            gam = x[L.gamma[k, t]]
            if gam < p.gamma_min - tol or gam > p.gamma_max + tol:
                msgs.append(f"vehicle {k} step {t}: SOC {gam:.6g} out of bounds")
            e, g = x[L.e[k, t]], x[L.g[k, t]]
            powered = float(sum(u[i] for i in range(N) if not out[i, t]))
            dark = float(sum(u[i] for i in range(N) if out[i, t]))
            if e < -tol or e > p.theta_c * powered + tol:
                msgs.append(f"vehicle {k} step {t}: charges {e:.6g} while not parked at a powered node")
            if g < -tol or g > p.theta_v2b * dark + tol:
                msgs.append(f"vehicle {k} step {t}: discharges {g:.6g} while not parked at an outage node")
            g_sum += g
        slack = x[L.slack[t]] if L.slack[t] >= 0 else 0.0
        if p.eta * g_sum + slack < pb.requirement[t] - tol:
            msgs.append(f"step {t}: delivered {p.eta * g_sum:.6g} below requirement {pb.requirement[t]:.6g}")
        if t < T - 1:
            for i in range(N):
                for j in range(N):
                    if i == j:
                        continue
                    lhs = x[L.d[i, j, t + 1]] - x[L.d[i, j, t]] - P[i, j, t] + x[L.v[:, i, j, t]].sum()
                    if abs(lhs) > tol:
                        msgs.append(f"queue {i}->{j} step {t}: flow off by {lhs:.3g}")
    return msgs
