"""Exhaustive-enumeration reference solver for tiny instances.

For fleet instances the oracle never reads the constraint matrix. It replays
the fleet dynamics step by step from the data the instance was assembled
from, enumerating every vehicle move (stay, carry i->j, relocate i->j) and a
discrete set of energy levels:

* charge ``e`` in ``{0, theta_c}``;
* discharge ``g`` in ``{0, theta_v2b}`` plus, for one vehicle at a time, the
  value that makes the emergency cover tight.

With a linear objective the continuous optimum sits at those levels as long
as the SOC bounds cannot bind inside the horizon. When that holds (checked
from the initial SOC, the horizon and the rates) dominated energy levels are
pruned: charging is never cheaper than not charging, and when discharging
earns money every eligible vehicle discharges at full rate. Outside that
regime the full level set is enumerated and the result is exact only among
those levels; ``Solution.info["exact"]`` says which case applied.
"""

from __future__ import annotations

import itertools
import math
import time

import numpy as np

from .model import MilpInstance
from .solver import Solution

TOL = 1e-9


class OracleRefusal(ValueError):
    """The instance is too large to enumerate."""


def soc_never_binds(problem) -> bool:
    p = problem.params
    T = problem.arrivals.shape[2]
    tmax = int(problem.net.travel_time.max())
    g0 = problem.state.Gamma
    low = g0 - T * (p.theta_v2b + p.theta_d) - p.theta_d * tmax
    high = g0 + T * p.theta_c
    return bool(np.all(low >= p.gamma_min + TOL) and np.all(high <= p.gamma_max - TOL))


def oracle_solve(instance: MilpInstance, limit: int = 10**7, prune: bool | None = None) -> Solution:
    """True optimum by enumeration, or a refusal when the tree exceeds ``limit``."""
    if instance.problem is None:
        return _brute_force(instance, limit)
    return _FleetOracle(instance, limit, prune).run()


def _brute_force(instance: MilpInstance, limit: int) -> Solution:
    if np.any(~instance.integer):
        raise OracleRefusal("generic enumeration needs every column to be integer")
    lo, hi = instance.lb, instance.ub
    if np.any(np.isinf(lo)) or np.any(np.isinf(hi)):
        raise OracleRefusal("generic enumeration needs finite bounds")
    sizes = (hi - lo + 1).astype(int)
    total = int(np.prod(sizes.astype(float))) if len(sizes) else 1
    if total > limit:
        raise OracleRefusal(f"{total} assignments exceed the enumeration limit {limit}")
    t0 = time.perf_counter()
    best, best_x = math.inf, None
    for combo in itertools.product(*[range(int(a), int(b) + 1) for a, b in zip(lo, hi)]):
        x = np.array(combo, dtype=float)
        ax = instance.A @ x
        if np.all(ax >= instance.row_lb - TOL) and np.all(ax <= instance.row_ub + TOL):
            val = instance.objective_value(x)
            if val < best - 1e-12:
                best, best_x = val, x
    wall = time.perf_counter() - t0
    if best_x is None:
        return Solution("infeasible", wall_time=wall, backend="oracle", info={"exact": True})
    return Solution("optimal", best, best_x, best, wall, "oracle", {"exact": True})


class _FleetOracle:
    def __init__(self, instance: MilpInstance, limit: int, prune: bool | None):
        self.inst = instance
        pb = self.pb = instance.problem
        self.p = pb.params
        self.net = pb.net
        self.tt = pb.net.travel_time
        self.N = pb.net.n
        self.K = pb.state.K
        self.T = pb.arrivals.shape[2]
        self.P = pb.arrivals
        self.out = pb.outage
        self.req = pb.requirement
        self.prices = pb.prices
        self.relax = pb.relax_penalty
        self.pairs = [(i, j) for i in range(self.N) for j in range(self.N) if i != j]
        self.exact = soc_never_binds(pb)
        self.prune = self.exact if prune is None else (prune and self.exact)
        levels = 1 if self.prune else 3
        per_vehicle = (1 + 2 * (self.N - 1)) * levels
        self.estimate = float(per_vehicle) ** (self.K * self.T)
        if self.estimate > limit:
            raise OracleRefusal(
                f"about {self.estimate:.3g} control sequences (N={self.N}, K={self.K}, T={self.T}) "
                f"exceed the enumeration limit {limit}"
            )
        self.memo: dict = {}

    # vehicle location: (0, i, 0) parked at i, (1, i, th) heading to i with th steps left
    def _initial(self):
        st = self.pb.state
        locs = []
        for k in range(self.K):
            parked = np.flatnonzero(st.U[k])
            if parked.size:
                locs.append((0, int(parked[0]), 0))
            else:
                i, th = np.argwhere(st.A[k])[0]
                locs.append((1, int(i), int(th)))
        d = tuple(float(st.D[i, j]) for i, j in self.pairs)
        return tuple(locs), tuple(float(g) for g in st.Gamma), d

    def _moves(self, loc, soc):
        kind, i, th = loc
        if kind == 1 and th > 0:
            return [("drift", None)]
        opts = [("stay", None)]
        for j in range(self.N):
            if j != i and soc >= self.p.gamma_min + self.p.theta_d * self.tt[i, j] - TOL:
                opts.append(("v", j))
                opts.append(("r", j))
        return opts

    def _energy_options(self, t, locs):
        """All (e-vector, g-vector, slack, cost) combinations for step t."""
        p = self.p
        price = self.prices[t]
        req = self.req[t]
        charge_ok, discharge_ok = [], []
        for k, (kind, i, _) in enumerate(locs):
            parked = kind == 0
            charge_ok.append(parked and not self.out[i, t])
            discharge_ok.append(parked and bool(self.out[i, t]))
        coef_g = p.omega - p.eta * price
        e_levels = [[0.0, p.theta_c] if (ok and not self.prune) else [0.0] for ok in charge_ok]
        if self.prune and coef_g < 0:
            g_levels = [[p.theta_v2b] if ok else [0.0] for ok in discharge_ok]
        else:
            g_levels = [[0.0, p.theta_v2b] if ok else [0.0] for ok in discharge_ok]
        combos = []
        for es in itertools.product(*e_levels):
            gsets = [list(gs) for gs in itertools.product(*g_levels)]
            if req > 0 and not (self.prune and coef_g < 0):
                extra = []
                for gs in gsets:
                    for k in range(self.K):
                        if discharge_ok[k] and gs[k] == 0.0:
                            need = req / p.eta - (sum(gs) - gs[k])
                            if TOL < need < p.theta_v2b - TOL:
                                g2 = list(gs)
                                g2[k] = need
                                extra.append(g2)
                gsets += extra
            for gs in gsets:
                delivered = p.eta * sum(gs)
                slack = 0.0
                if delivered < req - 1e-9:
                    if self.relax is None:
                        continue
                    slack = req - delivered
                cost = p.rho2 * sum((e - p.eta * g) * price + p.omega * g for e, g in zip(es, gs))
                if self.relax is not None:
                    cost += self.relax * slack
                combos.append((tuple(es), tuple(gs), slack, cost))
        return combos

    def _best(self, t, locs, socs, d):
        if t == self.T:
            return 0.0
        key = (t, locs, tuple(round(s, 10) for s in socs), tuple(round(x, 9) for x in d))
        hit = self.memo.get(key)
        if hit is not None:
            return hit[0]
        p = self.p
        wait = sum(d)
        best = (math.inf, None)
        energy = self._energy_options(t, locs)
        move_sets = [self._moves(loc, s) for loc, s in zip(locs, socs)]
        avail = {pair: d[n] + self.P[pair[0], pair[1], t] for n, pair in enumerate(self.pairs)}
        for moves in itertools.product(*move_sets):
            picks: dict = {}
            relo = 0.0
            ok = True
            for loc, (kind, j) in zip(locs, moves):
                if kind == "v":
                    pair = (loc[1], j)
                    picks[pair] = picks.get(pair, 0) + 1
                    if picks[pair] > avail[pair] + TOL:
                        ok = False
                        break
                elif kind == "r":
                    relo += self.tt[loc[1], j]
            if not ok:
                continue
            new_locs = []
            moving = []
            for loc, (kind, j) in zip(locs, moves):
                lk, i, th = loc
                if kind == "drift":
                    new_locs.append((1, i, th - 1))
                elif kind == "stay":
                    new_locs.append((0, i, 0))
                else:
                    new_locs.append((1, j, int(self.tt[i, j]) - 1))
                moving.append(new_locs[-1][0] == 1)
            new_locs = tuple(new_locs)
            new_d = tuple(d[n] + self.P[i, j, t] - picks.get((i, j), 0) for n, (i, j) in enumerate(self.pairs))
            move_cost = wait + p.rho1 * relo
            for es, gs, slack, ecost in energy:
                new_socs = []
                feas = True
                for k in range(self.K):
                    s = socs[k] + es[k] - gs[k] - p.theta_d * moving[k]
                    if s < p.gamma_min - TOL or s > p.gamma_max + TOL:
                        feas = False
                        break
                    new_socs.append(s)
                if not feas:
                    continue
                total = move_cost + ecost
                rest = self._best(t + 1, new_locs, tuple(new_socs), new_d)
                total += rest
                if total < best[0] - 1e-12:
                    best = (total, (moves, es, gs, slack, new_locs, tuple(new_socs), new_d))
        self.memo[key] = best
        return best[0]

    def run(self) -> Solution:
        t0 = time.perf_counter()
        locs, socs, d = self._initial()
        p = self.p
        info = {"exact": self.exact, "pruned": self.prune, "estimate": self.estimate}
        if any(s < p.gamma_min - TOL or s > p.gamma_max + TOL for s in socs):
            return Solution("infeasible", wall_time=time.perf_counter() - t0, backend="oracle", info=info)
        val = self._best(0, locs, socs, d)
        wall = time.perf_counter() - t0
        info["states"] = len(self.memo)
        if math.isinf(val):
            return Solution("infeasible", wall_time=wall, backend="oracle", info=info)
        x = self._columns(locs, socs, d)
        info["max_violation"] = self.inst.max_violation(x)
        info["column_objective"] = self.inst.objective_value(x)
        return Solution("optimal", val, x, val, wall, "oracle", info)

    def _columns(self, locs, socs, d):
        """Column vector of the optimal path (for cross-checking against the MILP)."""
        L = self.inst.layout
        x = np.zeros(self.inst.n_cols)
        for t in range(self.T):
            key = (t, locs, tuple(round(s, 10) for s in socs), tuple(round(v, 9) for v in d))
            _, choice = self.memo[key]
            moves, es, gs, slack, nl, ns, nd = choice
            for n, (i, j) in enumerate(self.pairs):
                x[L.d[i, j, t]] = d[n]
            for k, (kind, i, th) in enumerate(locs):
                if kind == 0:
                    x[L.u[k, i, t]] = 1
                else:
                    x[L.a[k, i, th, t]] = 1
                x[L.gamma[k, t]] = socs[k]
                x[L.e[k, t]] = es[k]
                x[L.g[k, t]] = gs[k]
                mk, j = moves[k]
                if mk in ("v", "r"):
                    x[getattr(L, mk)[k, i, j, t]] = 1
            if L.slack[t] >= 0:
                x[L.slack[t]] = slack
            locs, socs, d = nl, ns, nd
        return x
