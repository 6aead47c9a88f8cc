"""Scenario data model: network, fleet parameters, outages, trip ingestion.

Node and trip files are comma-delimited text with a header row. Node
coordinates are planar metres (any projected CRS); nothing is re-projected.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np

logger = logging.getLogger(__name__)

WALK_MODES = frozenset({"walk", "walking", "foot"})


class ScenarioError(ValueError):
    """Raised for invalid scenario data or configuration."""


class TripParseError(ScenarioError):
    """A trip or node file row could not be parsed."""

    def __init__(self, path, line: int, message: str):
        self.path = str(path)
        self.line = line
        super().__init__(f"{self.path}:{line}: {message}")


@dataclass(frozen=True)
class Node:
    id: int
    centroid: tuple[float, float]
    label: str = ""

    def __post_init__(self):
        if not all(math.isfinite(c) for c in self.centroid):
            raise ScenarioError(f"node {self.id} has a non-finite centroid {self.centroid}")


@dataclass(frozen=True, eq=False)
class Network:
    """Nodes plus integer step travel times.

    ``travel_time[j, i]`` is the number of steps to drive from node ``j`` to
    node ``i``; ``distance`` is in km.
    """

    nodes: tuple[Node, ...]
    travel_time: np.ndarray
    distance: np.ndarray

    def __post_init__(self):
        n = len(self.nodes)
        tt = np.asarray(self.travel_time, dtype=np.int64)
        if tt.shape != (n, n):
            raise ScenarioError(f"travel_time shape {tt.shape} does not match {n} nodes")
        if np.any(np.diag(tt) != 0):
            raise ScenarioError("travel_time diagonal must be zero")
        off = ~np.eye(n, dtype=bool)
        if np.any(tt[off] < 1):
            raise ScenarioError("off-diagonal travel times must be >= 1 step")
        tt.setflags(write=False)
        dist = np.asarray(self.distance, dtype=float)
        dist.setflags(write=False)
        object.__setattr__(self, "travel_time", tt)
        object.__setattr__(self, "distance", dist)

    @property
    def n(self) -> int:
        return len(self.nodes)

    def max_theta(self, i: int) -> int:
        """Largest remaining-steps index for vehicles heading to node ``i``."""
        if self.n == 1:
            return 0
        col = np.delete(self.travel_time[:, i], i)
        return int(col.max()) - 1

    @property
    def max_thetas(self) -> tuple[int, ...]:
        return tuple(self.max_theta(i) for i in range(self.n))

    @classmethod
    def from_travel_times(cls, travel_time, labels: Sequence[str] | None = None) -> "Network":
        """Network with abstract nodes (no geometry) from an explicit step matrix."""
        tt = np.asarray(travel_time, dtype=np.int64)
        n = tt.shape[0]
        labels = labels or [str(i) for i in range(n)]
        nodes = tuple(Node(i, (0.0, 0.0), labels[i]) for i in range(n))
        return cls(nodes, tt, np.zeros((n, n)))

    def fingerprint(self) -> list:
        return self.travel_time.tolist()


@dataclass(frozen=True)
class TripRecord:
    origin_node: int
    destination_node: int
    departure_time: float  # seconds since midnight

    def __post_init__(self):
        if self.origin_node == self.destination_node:
            raise ScenarioError("intra-node trips are not representable")


@dataclass(frozen=True)
class ModelParams:
    """Fleet, energy and horizon parameters (defaults: the Ile-de-France case).

    Energy quantities are SOC fractions of one battery; ``sigma`` may be a
    scalar price or a per-step schedule (repeated cyclically).
    """

    gamma_max: float = 1.0
    gamma_min: float = 0.2
    gamma_init: float = 0.8
    theta_d: float = 0.0092
    theta_c: float = 0.01
    theta_v2b: float = 0.01
    eta: float = 0.9
    rho1: float = 0.01
    rho2: float = 0.001
    tau_minutes: float = 6.0
    horizon_T: int = 10
    horizon_L: int = 240
    battery_kwh: float = 85.0
    sigma: float | tuple[float, ...] = 0.1292
    omega: float = 0.07974
    fleet_size: int = 30

    def __post_init__(self):
        if isinstance(self.sigma, list):
            object.__setattr__(self, "sigma", tuple(self.sigma))
        if not 0 <= self.gamma_min < self.gamma_init <= self.gamma_max <= 1:
            raise ScenarioError(
                "need 0 <= gamma_min < gamma_init <= gamma_max <= 1, got "
                f"{self.gamma_min}, {self.gamma_init}, {self.gamma_max}"
            )
        for name in ("theta_d", "theta_c", "theta_v2b", "tau_minutes", "battery_kwh"):
            if getattr(self, name) <= 0:
                raise ScenarioError(f"{name} must be > 0")
        if not 0 < self.eta <= 1:
            raise ScenarioError("eta must lie in (0, 1]")
        if not self.rho1 > self.rho2 > 0:
            raise ScenarioError("penalty weights need rho1 > rho2 > 0")
        if self.horizon_T < 2:
            raise ScenarioError("horizon_T must be >= 2")
        if self.horizon_L < 0 or self.fleet_size < 1:
            raise ScenarioError("horizon_L must be >= 0 and fleet_size >= 1")
        if self.omega < 0 or min(self.prices) < 0:
            raise ScenarioError("prices must be non-negative")

    @property
    def prices(self) -> tuple[float, ...]:
        return self.sigma if isinstance(self.sigma, tuple) else (float(self.sigma),)

    def price_at(self, step: int) -> float:
        p = self.prices
        return p[step % len(p)]

    @property
    def mean_price(self) -> float:
        return float(np.mean(self.prices))

    def with_(self, **changes) -> "ModelParams":
        return replace(self, **changes)

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


@dataclass(frozen=True)
class OutageEvent:
    node: int
    start_step: int
    end_step: int  # exclusive

    def __post_init__(self):
        if self.start_step >= self.end_step:
            raise ScenarioError(f"outage start {self.start_step} must precede end {self.end_step}")
        if self.start_step < 0:
            raise ScenarioError("outage start must be >= 0")


@dataclass(frozen=True)
class OutageSchedule:
    """Outage events with the building demand and backup supply per step.

    ``q_demand`` and ``q_backup`` are SOC units of one vehicle battery per step.
    """

    events: tuple[OutageEvent, ...] = ()
    q_demand: float = 0.0
    q_backup: float = 0.0

    def __post_init__(self):
        evs = tuple(e if isinstance(e, OutageEvent) else OutageEvent(*e) for e in self.events)
        object.__setattr__(self, "events", evs)
        if not self.q_demand >= self.q_backup >= 0:
            raise ScenarioError("need q_demand >= q_backup >= 0")

    @property
    def requirement(self) -> float:
        return self.q_demand - self.q_backup

    @property
    def nodes(self) -> list[int]:
        return sorted({e.node for e in self.events})


@dataclass
class ValidationReport:
    status: str = "ok"
    hazards: list[tuple[int, int, int]] = field(default_factory=list)  # (from, to, steps)
    messages: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return self.status == "ok"

    def _raise_to(self, level: str):
        order = {"ok": 0, "warn": 1, "fail": 2}
        if order[level] > order[self.status]:
            self.status = level

    def __str__(self) -> str:
        lines = [f"status: {self.status}"]
        lines += [f"  - {m}" for m in self.messages]
        return "\n".join(lines)


# --------------------------------------------------------------------------- #
# ingestion


def _rows(path):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            yield reader.line_num, row


def load_nodes(path) -> list[Node]:
    """Read a node file with columns ``id, x, y, label``."""
    nodes = []
    for line, row in _rows(path):
        try:
            nodes.append(
                Node(int(row["id"]), (float(row["x"]), float(row["y"])), (row.get("label") or "").strip())
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise TripParseError(path, line, f"bad node row: {exc}") from None
    nodes.sort(key=lambda n: n.id)
    return nodes


def build_network(centroids: Sequence[Node], speed_kmh: float = 60.0, tau_minutes: float = 6.0) -> Network:
    """Straight-line network from node centroids.

    Travel time is ``ceil(km / speed * 60 / tau)`` steps with a floor of one
    step between distinct nodes.
    """
    if len(centroids) < 2:
        raise ScenarioError("a network needs at least two nodes")
    if speed_kmh <= 0 or tau_minutes <= 0:
        raise ScenarioError("speed and step length must be positive")
    ids = [n.id for n in centroids]
    if len(set(ids)) != len(ids):
        raise ScenarioError(f"duplicate node ids in {ids}")
    nodes = sorted(centroids, key=lambda n: n.id)
    if [n.id for n in nodes] != list(range(len(nodes))):
        raise ScenarioError("node ids must be contiguous from 0")
    xy = np.array([n.centroid for n in nodes], dtype=float)
    dist_km = np.sqrt(((xy[:, None, :] - xy[None, :, :]) ** 2).sum(axis=-1)) / 1000.0
    steps = np.ceil(np.round(dist_km / speed_kmh * 60.0 / tau_minutes, 9)).astype(np.int64)
    steps = np.maximum(steps, 1)
    np.fill_diagonal(steps, 0)
    return Network(tuple(nodes), steps, dist_km)


def nearest_node(net: Network, x: float, y: float) -> int:
    xy = np.array([n.centroid for n in net.nodes])
    d2 = (xy[:, 0] - x) ** 2 + (xy[:, 1] - y) ** 2
    return int(np.argmin(d2))


@dataclass
class TripLoad:
    trips: list[TripRecord]
    rows: int = 0
    dropped_intra: int = 0
    dropped_walk: int = 0

    @property
    def dropped(self) -> int:
        return self.dropped_intra + self.dropped_walk


def read_trips(path, network: Network) -> TripLoad:
    """Parse a trip file and keep the counts of discarded rows."""
    xy = np.array([n.centroid for n in network.nodes])
    out = TripLoad([])
    for line, row in _rows(path):
        out.rows += 1
        try:
            ox, oy = float(row["origin_x"]), float(row["origin_y"])
            dx, dy = float(row["dest_x"]), float(row["dest_y"])
            dep = float(row["departure_seconds"])
            mode = (row.get("mode") or "").strip().lower()
        except (KeyError, TypeError, ValueError) as exc:
            raise TripParseError(path, line, f"malformed trip row: {exc}") from None
        if not all(math.isfinite(v) for v in (ox, oy, dx, dy, dep)):
            raise TripParseError(path, line, "non-finite value")
        if mode in WALK_MODES:
            out.dropped_walk += 1
            continue
        o = int(np.argmin((xy[:, 0] - ox) ** 2 + (xy[:, 1] - oy) ** 2))
        d = int(np.argmin((xy[:, 0] - dx) ** 2 + (xy[:, 1] - dy) ** 2))
        if o == d:
            out.dropped_intra += 1
            continue
        out.trips.append(TripRecord(o, d, dep))
    return out


def load_trips(path, node_assignment: Network) -> list[TripRecord]:
    """Map trips to nearest-centroid nodes, dropping walk and intra-node trips."""
    res = read_trips(path, node_assignment)
    logger.info(
        "%s: %d rows, kept %d, dropped %d intra-node and %d walk trips",
        path, res.rows, len(res.trips), res.dropped_intra, res.dropped_walk,
    )
    if not res.trips:
        raise ScenarioError(f"{path}: no usable trips ({res.rows} rows, {res.dropped} dropped)")
    return res.trips


def write_trips(path, rows) -> None:
    """Write raw trip rows ``(ox, oy, dx, dy, departure_seconds, mode)``."""
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["origin_x", "origin_y", "dest_x", "dest_y", "departure_seconds", "mode"])
        w.writerows(rows)


def write_nodes(path, nodes: Sequence[Node]) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "x", "y", "label"])
        for n in nodes:
            w.writerow([n.id, repr(float(n.centroid[0])), repr(float(n.centroid[1])), n.label])


# --------------------------------------------------------------------------- #
# validation


def validate_scenario(params: ModelParams, net: Network, outages: OutageSchedule) -> ValidationReport:
    """Static feasibility diagnostics; never raises."""
    rep = ValidationReport()
    T = params.horizon_T
    for j in range(net.n):
        for i in range(net.n):
            if i != j and net.travel_time[j, i] >= T:
                rep.hazards.append((j, i, int(net.travel_time[j, i])))
    if rep.hazards:
        rep._raise_to("warn")
        shown = ", ".join(f"{j}->{i} ({s} steps)" for j, i, s in rep.hazards[:20])
        more = "" if len(rep.hazards) <= 20 else f" and {len(rep.hazards) - 20} more"
        rep.messages.append(f"travel time >= horizon T={T}: {shown}{more}")

    for ev in outages.events:
        if not 0 <= ev.node < net.n:
            rep._raise_to("fail")
            rep.messages.append(f"outage node {ev.node} outside network of {net.n} nodes")
        if ev.end_step > params.horizon_L:
            rep._raise_to("warn")
            rep.messages.append(f"outage at node {ev.node} ends at {ev.end_step} beyond L={params.horizon_L}")
        far = [j for j in range(net.n) if j != ev.node and 0 <= ev.node < net.n
               and net.travel_time[j, ev.node] >= T]
        if far:
            rep.messages.append(f"outage node {ev.node} unreachable within T from nodes {far}")

    if outages.events:
        need = outages.requirement
        cap = params.fleet_size * params.theta_v2b * params.eta
        if need > cap + 1e-12:
            rep._raise_to("fail")
            rep.messages.append(
                f"emergency requirement {need:.6g} SOC/step exceeds fleet V2B capacity {cap:.6g}"
            )
    return rep
