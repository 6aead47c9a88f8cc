"""Shared fixtures: tiny networks and a cache of mid-scale runs."""

from __future__ import annotations

import numpy as np
import pytest

from saev_resilience.config import Scenario
from saev_resilience.demand import ArrivalMatrix
from saev_resilience.scenario import ModelParams, Network, OutageEvent, OutageSchedule

LINE3 = [[0, 1, 2], [1, 0, 1], [2, 1, 0]]


def arrivals(n, L, cells=()):
    """Arrival table with ``count`` passengers at each ``(i, j, step, count)``."""
    P = np.zeros((n, n, L), dtype=np.int64)
    for i, j, s, c in cells:
        P[i, j, s] += c
    return ArrivalMatrix(P)


def tiny_scenario(travel=LINE3, K=2, T=3, L=5, placement=None, events=(), req=0.009, **kw):
    params = ModelParams(fleet_size=K, horizon_T=T, horizon_L=L, **kw.pop("params", {}))
    net = Network.from_travel_times(travel)
    out = OutageSchedule(tuple(OutageEvent(*e) for e in events), req if events else 0.0, 0.0)
    placement = list(range(K)) if placement is None else placement
    return Scenario(params, net, out, placement=placement, **kw)


@pytest.fixture
def line3():
    return Network.from_travel_times(LINE3)


class MidRuns:
    """Lazily computed mid-scale runs shared by every test in the session."""

    def __init__(self):
        self._cache = {}

    def get(self, seed, **kw):
        from saev_resilience.mpc import run
        from saev_resilience.synthetic import mid_scale

        key = (seed, tuple(sorted(kw.items())))
        if key not in self._cache:
            sc = mid_scale(seed, **kw)
            arr = sc.arrivals()
            self._cache[key] = (sc, arr, run(sc, arr))
        return self._cache[key]

    def put(self, seed, value, **kw):
        self._cache[(seed, tuple(sorted(kw.items())))] = value


@pytest.fixture(scope="session")
def mid_runs():
    return MidRuns()


_VERDICTS: list[str] = []


@pytest.fixture
def verdict():
    """Record one acceptance line; the lines are repeated in the terminal summary."""

    def record(number, ok, detail):
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
        _VERDICTS.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in _VERDICTS:
            terminalreporter.write_line(line)
