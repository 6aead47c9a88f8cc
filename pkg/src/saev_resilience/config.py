"""Scenario files: one TOML document per run.

Layout (every key optional unless noted)::

    name = "base"

    [network]                 # required: nodes file or explicit travel_time
    nodes = "nodes.csv"       # id,x,y,label; relative to the scenario file
    speed_kmh = 60.0
    travel_time = [[0, 1], [1, 0]]

    [params]                  # any ModelParams field
    fleet_size = 30
    horizon_T = 10

    [demand]
    source = "sample"         # sample | replay | file | none
    trips = "trips.csv"       # origin_x,origin_y,dest_x,dest_y,departure_seconds,mode
    arrivals = "arrivals.csv" # for source = "file"
    seed = 0
    bucket_minutes = 30
    passengers = 292          # rescale sampled rates to this expected total

    [outage]
    q_demand = 3.678          # SOC / step
    q_backup = 3.5294
    events = [{node = 1, start = 175, end = 185}]

    [fleet]
    placement = "uniform"     # uniform | demand | [node, node, ...]
    seed = 0

    [mpc]
    terminal = "pad"          # pad | shrink
    forecast = "realized"     # realized | expected
    relax_emergency = false
    emergency_penalty = 1000.0

    [solver]
    rel_gap = 1e-4
    time_limit_s = 3600.0
    threads = 1

Unknown sections or keys are rejected. ``--set section.key=value`` overrides
use TOML value syntax.
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .demand import ArrivalMatrix, RateMatrix, estimate_rates, read_arrivals, replay_arrivals, sample_arrivals
from .scenario import (
    ModelParams,
    Network,
    OutageEvent,
    OutageSchedule,
    ScenarioError,
    build_network,
    load_nodes,
    load_trips,
)
from .solver import SolveOptions

SCHEMA = {
    "": {"name"},
    "network": {"nodes", "speed_kmh", "travel_time"},
    "params": set(ModelParams.field_names()),
    "demand": {"source", "trips", "arrivals", "seed", "bucket_minutes", "passengers"},
    "outage": {"q_demand", "q_backup", "events"},
    "fleet": {"placement", "seed"},
    "mpc": {"terminal", "forecast", "relax_emergency", "emergency_penalty"},
    "solver": {"rel_gap", "time_limit_s", "threads"},
}


@dataclass
class Scenario:
    params: ModelParams
    net: Network
    outages: OutageSchedule = field(default_factory=OutageSchedule)
    name: str = "scenario"
    placement: str | list = "uniform"
    placement_seed: int = 0
    terminal: str = "pad"
    forecast: str = "realized"
    relax_emergency: bool = False
    emergency_penalty: float = 1000.0
    demand_source: str = "none"
    demand_seed: int = 0
    passengers: float | None = None
    rates: RateMatrix | None = None
    trips: list | None = None
    arrivals_file: str | None = None
    solve: SolveOptions = field(default_factory=SolveOptions)

    def __post_init__(self):
        if self.terminal not in ("pad", "shrink"):
            raise ScenarioError(f"mpc.terminal must be 'pad' or 'shrink', got {self.terminal!r}")
        if self.forecast not in ("realized", "expected"):
            raise ScenarioError(f"mpc.forecast must be 'realized' or 'expected', got {self.forecast!r}")
        if self.demand_source not in ("sample", "replay", "file", "none"):
            raise ScenarioError(f"unknown demand source {self.demand_source!r}")
        for ev in self.outages.events:
            if not 0 <= ev.node < self.net.n:
                raise ScenarioError(f"outage node {ev.node} is not in the network")

    def with_params(self, **changes) -> "Scenario":
        return replace(self, params=self.params.with_(**changes))

    def with_outages(self, outages: OutageSchedule) -> "Scenario":
        return replace(self, outages=outages)

    def describe(self, include_outage: bool = True) -> dict:
        d = {
            "params": asdict(self.params),
            "travel_time": self.net.fingerprint(),
            "placement": self.placement,
            "placement_seed": self.placement_seed,
            "terminal": self.terminal,
            "forecast": self.forecast,
            "relax_emergency": self.relax_emergency,
        }
        if include_outage:
            d["outages"] = {
                "events": [asdict(e) for e in self.outages.events],
                "q_demand": self.outages.q_demand,
                "q_backup": self.outages.q_backup,
            }
        return d

    def fingerprint(self, include_outage: bool = True) -> str:
        blob = json.dumps(self.describe(include_outage), sort_keys=True, default=list)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def arrivals(self, seed: int | None = None) -> ArrivalMatrix:
        """Demand for one run according to the configured source."""
        L, n = self.params.horizon_L, self.net.n
        seed = self.demand_seed if seed is None else seed
        if self.demand_source == "none":
            return ArrivalMatrix.zeros(n, L)
        if self.demand_source == "file":
            return read_arrivals(self.arrivals_file, n, L)
        if self.demand_source == "replay":
            return replay_arrivals(self.trips or [], self.params, n)
        rates = self.rates
        if rates is None:
            raise ScenarioError("sampled demand needs a rate matrix (demand.trips)")
        if self.passengers is not None:
            rates = rates.scaled_to(self.passengers, L)
        return sample_arrivals(rates, seed, L)


def _check_keys(doc: dict):
    for key, val in doc.items():
        if isinstance(val, dict):
            if key not in SCHEMA or key == "":
                raise ScenarioError(f"unknown scenario section [{key}]")
            extra = set(val) - SCHEMA[key]
            if extra:
                raise ScenarioError(f"unknown keys in [{key}]: {sorted(extra)}")
        elif key not in SCHEMA[""]:
            raise ScenarioError(f"unknown top-level key {key!r}")


def parse_override(text: str) -> tuple[str, str, object]:
    if "=" not in text:
        raise ScenarioError(f"override {text!r} is not key=value")
    key, raw = text.split("=", 1)
    key = key.strip()
    if "." in key:
        section, name = key.split(".", 1)
    else:
        section, name = "", key
    try:
        value = tomllib.loads(f"v = {raw.strip()}")["v"]
    except tomllib.TOMLDecodeError:
        value = raw.strip()
    if section not in SCHEMA or name not in SCHEMA[section]:
        raise ScenarioError(f"override {key!r} does not name a documented scenario key")
    return section, name, value


def apply_overrides(doc: dict, overrides) -> dict:
    doc = copy.deepcopy(doc)
    for text in overrides or ():
        section, name, value = parse_override(text)
        target = doc if section == "" else doc.setdefault(section, {})
        target[name] = value
    return doc


def scenario_from_dict(doc: dict, base_dir=".") -> Scenario:
    _check_keys(doc)
    base = Path(base_dir)
    params = ModelParams(**doc.get("params", {}))

    netdoc = doc.get("network", {})
    if "travel_time" in netdoc:
        net = Network.from_travel_times(netdoc["travel_time"])
    elif "nodes" in netdoc:
        nodes = load_nodes(base / netdoc["nodes"])
        net = build_network(nodes, float(netdoc.get("speed_kmh", 60.0)), params.tau_minutes)
    else:
        raise ScenarioError("[network] needs either 'nodes' or 'travel_time'")

    od = doc.get("outage", {})
    events = tuple(OutageEvent(int(e["node"]), int(e["start"]), int(e["end"])) for e in od.get("events", []))
    outages = OutageSchedule(events, float(od.get("q_demand", 0.0)), float(od.get("q_backup", 0.0)))

    dd = doc.get("demand", {})
    source = dd.get("source", "sample" if "trips" in dd else "none")
    trips = rates = None
    if "trips" in dd:
        trips = load_trips(base / dd["trips"], net)
        rates = estimate_rates(trips, params, net.n, int(dd.get("bucket_minutes", 30)))
    arrivals_file = str(base / dd["arrivals"]) if "arrivals" in dd else None
    if source == "file" and arrivals_file is None:
        raise ScenarioError("demand.source = 'file' needs demand.arrivals")

    fd = doc.get("fleet", {})
    md = doc.get("mpc", {})
    sd = doc.get("solver", {})
    return Scenario(
        params=params,
        net=net,
        outages=outages,
        name=doc.get("name", "scenario"),
        placement=fd.get("placement", "uniform"),
        placement_seed=int(fd.get("seed", 0)),
        terminal=md.get("terminal", "pad"),
        forecast=md.get("forecast", "realized"),
        relax_emergency=bool(md.get("relax_emergency", False)),
        emergency_penalty=float(md.get("emergency_penalty", 1000.0)),
        demand_source=source,
        demand_seed=int(dd.get("seed", 0)),
        passengers=dd.get("passengers"),
        rates=rates,
        trips=trips,
        arrivals_file=arrivals_file,
        solve=SolveOptions(**{k: sd[k] for k in sd}),
    )


def load_scenario(path, overrides=()) -> Scenario:
    path = Path(path)
    try:
        doc = tomllib.loads(path.read_text())
    except tomllib.TOMLDecodeError as exc:
        raise ScenarioError(f"{path}: {exc}") from None
    _check_keys(doc)
    return scenario_from_dict(apply_overrides(doc, overrides), path.parent)
