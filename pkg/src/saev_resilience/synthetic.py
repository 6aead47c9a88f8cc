"""Synthetic networks and trip lists for tests and examples.

The city is a hub at the origin with the remaining nodes evenly spaced on a
circle around it. Trips leave uniformly in time; a configurable share
starts at the hub so demand has one dominant origin.
"""

from __future__ import annotations

import math

import numpy as np

from .config import Scenario
from .scenario import ModelParams, Network, Node, OutageEvent, OutageSchedule, TripRecord, build_network


def hub_city(n_nodes: int = 8, radius_km: float = 9.0, speed_kmh: float = 60.0,
             tau_minutes: float = 6.0) -> Network:
    nodes = [Node(0, (0.0, 0.0), "hub")]
    for k in range(1, n_nodes):
        ang = 2 * math.pi * (k - 1) / (n_nodes - 1)
        r = radius_km * 1000.0  # centroids are metres
        nodes.append(Node(k, (r * math.cos(ang), r * math.sin(ang)), f"ring{k}"))
    return build_network(nodes, speed_kmh, tau_minutes)


def synthetic_trips(net: Network, passengers: int, L: int, tau_minutes: float = 6.0, seed: int = 0,
                    hub: int = 0, hub_share: float = 0.4, last_step: int | None = None) -> list[TripRecord]:
    """``passengers`` trips departing uniformly over steps ``[0, last_step)``.

    ``hub_share`` of the trips start at ``hub``; the rest start uniformly at
    the other nodes. Destinations are uniform over nodes other than the origin.
    """
    rng = np.random.Generator(np.random.Philox(key=int(seed)))
    last = L if last_step is None else last_step
    others = [i for i in range(net.n) if i != hub]
    trips = []
    for _ in range(passengers):
        o = hub if rng.random() < hub_share else int(rng.choice(others))
        d = int(rng.choice([j for j in range(net.n) if j != o]))
        step = int(rng.integers(0, last))
        sec = (step + float(rng.random()) * 0.999) * tau_minutes * 60.0
        trips.append(TripRecord(o, d, sec))
    trips.sort(key=lambda t: t.departure_time)
    return trips


def mid_scale(seed: int = 0, passengers: int = 100, fleet_size: int = 10, L: int = 120,
              outage_node: int | None = 3, outage_start: int = 50, outage_length: int = 10,
              requirement: float = 0.045, **params) -> Scenario:
    """Eight-node hub city with replayed demand and at most one outage."""
    p = ModelParams(fleet_size=fleet_size, horizon_L=L, **params)
    net = hub_city(8, tau_minutes=p.tau_minutes)
    trips = synthetic_trips(net, passengers, L, p.tau_minutes, seed, last_step=L - 5)
    events = () if outage_node is None else (
        OutageEvent(outage_node, outage_start, outage_start + outage_length),)
    return Scenario(p, net, OutageSchedule(events, requirement, 0.0), name=f"mid-{seed}",
                    placement="uniform", placement_seed=seed, demand_source="replay", demand_seed=seed,
                    trips=trips)


def full_scale(seed: int = 0, passengers: float = 292.0, outage: bool = False, **params) -> Scenario:
    """25-node, 30-vehicle day with sampled demand; optionally the evening hospital outage at node 1."""
    from .demand import estimate_rates
    from .resilience import hospital_outage

    p = ModelParams(fleet_size=30, horizon_L=240, **params)
    net = hub_city(25, tau_minutes=p.tau_minutes)
    history = synthetic_trips(net, 2000, p.horizon_L, p.tau_minutes, seed=10_000 + seed)
    rates = estimate_rates(history, p, net.n)
    sched = hospital_outage(params=p, events=(OutageEvent(1, 175, 185),)) if outage else OutageSchedule()
    return Scenario(p, net, sched, name=f"full-{seed}", placement="demand", placement_seed=seed,
                    demand_source="sample", demand_seed=seed, passengers=passengers, rates=rates)
