"""Outage masks, the emergency requirement and the V2B cost model."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .scenario import ModelParams, OutageSchedule

logger = logging.getLogger(__name__)

HOURS_PER_YEAR = 8760.0


def outage_mask(schedule: OutageSchedule, L: int, n_nodes: int | None = None) -> np.ndarray:
    """``(N, L)`` 0/1 table, one on every (node, step) an event covers.

    Overlapping events on one node are merged with a warning.
    """
    n = n_nodes if n_nodes is not None else 1 + max((e.node for e in schedule.events), default=-1)
    mask = np.zeros((max(n, 0), L), dtype=np.int64)
    for ev in schedule.events:
        lo, hi = max(ev.start_step, 0), min(ev.end_step, L)
        if hi <= lo:
            continue
        if mask[ev.node, lo:hi].any():
            logger.warning("overlapping outage events at node %d around steps %d-%d merged", ev.node, lo, hi)
        mask[ev.node, lo:hi] = 1
    return mask


def outage_window(mask: np.ndarray, start: int, length: int) -> np.ndarray:
    out = np.zeros((mask.shape[0], length), dtype=np.int64)
    stop = min(mask.shape[1], start + length)
    if stop > start:
        out[:, : stop - start] = mask[:, start:stop]
    return out


def emergency_requirement(outage: OutageSchedule, L: int, n_nodes: int | None = None) -> np.ndarray:
    """Per-step SOC the fleet must deliver: ``Q_d - Q_m`` while an outage is active."""
    mask = outage_mask(outage, L, n_nodes)
    return outage.requirement * mask.sum(axis=0).astype(float)


def building_step_demand_kwh(intensity_kwh_m2_year: float, area_m2: float, tau_minutes: float) -> float:
    """Average building energy use in one step, from annual intensity and floor area."""
    return intensity_kwh_m2_year * area_m2 / HOURS_PER_YEAR * tau_minutes / 60.0


def generator_step_supply_kwh(count: int, rating_kw: float, tau_minutes: float) -> float:
    return count * rating_kw * tau_minutes / 60.0


def kwh_to_soc(kwh: float, battery_kwh: float) -> float:
    return kwh / battery_kwh


def hospital_outage(intensity_kwh_m2_year: float = 228.2, area_m2: float = 120_000.0,
                    generators: int = 6, rating_kw: float = 500.0,
                    params: ModelParams | None = None, events=()) -> OutageSchedule:
    """Outage schedule whose Q_d / Q_m come from building and generator data."""
    params = params or ModelParams()
    qd = kwh_to_soc(building_step_demand_kwh(intensity_kwh_m2_year, area_m2, params.tau_minutes),
                    params.battery_kwh)
    qm = kwh_to_soc(generator_step_supply_kwh(generators, rating_kw, params.tau_minutes), params.battery_kwh)
    return OutageSchedule(tuple(events), qd, min(qm, qd))


def min_dischargers(requirement_soc: float, theta_v2b: float, eta: float) -> int:
    """Fewest vehicles discharging at full rate that cover the requirement."""
    if requirement_soc <= 0:
        return 0
    return math.ceil(requirement_soc / eta / theta_v2b - 1e-9)


@dataclass(frozen=True)
class CostInputs:
    K: int = 30
    C_v: float = 45.0  # EUR / vehicle / year
    sigma: float = 0.1292  # EUR / kWh
    omega: float = 0.0797  # EUR / kWh
    B: float = 85.0  # kWh
    theta_c: float = 0.01  # SOC / step
    T_relo: float = 0.0  # minutes, emergency minus normal
    q_v2b: float = 0.0  # kWh per outage
    f_out: float = 0.0  # outages / year
    generator_annual: float = 13_367.0  # EUR / year
    tau_minutes: float = 6.0
    per_step_relocation: bool = False

    def __post_init__(self):
        for name in ("K", "C_v", "sigma", "omega", "B", "theta_c", "q_v2b", "f_out", "generator_annual"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.T_relo < 0:
            logger.warning("negative relocation-time difference %.1f min: emergency relocated less", self.T_relo)

    @property
    def flags(self) -> list[str]:
        return ["negative T_relo"] if self.T_relo < 0 else []


@dataclass(frozen=True)
class CostBreakdown:
    C_i: float  # EUR / year
    C_e: float  # EUR / outage
    C_r: float  # EUR / outage
    C_v2b: float  # EUR / year
    f_out: float = 0.0

    def as_rows(self) -> list[tuple[str, float]]:
        return [("C_i", self.C_i), ("C_e", self.C_e), ("C_r", self.C_r), ("f_out", self.f_out),
                ("C_v2b", self.C_v2b)]


def v2b_cost(inputs: CostInputs) -> CostBreakdown:
    """Annual V2B cost: installation plus per-outage energy and relocation costs.

    The relocation term multiplies the relocation-time difference in minutes
    by the per-step charge rate (the default convention for the reference
    cost figures). ``per_step_relocation=True`` converts minutes to steps
    first.
    """
    C_i = inputs.K * inputs.C_v
    C_e = (inputs.sigma + inputs.omega) * inputs.q_v2b
    t_relo = inputs.T_relo / inputs.tau_minutes if inputs.per_step_relocation else inputs.T_relo
    C_r = t_relo * inputs.theta_c * inputs.B * inputs.sigma
    return CostBreakdown(C_i, C_e, C_r, C_i + inputs.f_out * (C_e + C_r), inputs.f_out)


@dataclass(frozen=True)
class BreakEven:
    frequency: float  # outages / year; inf when V2B always wins
    threshold: float  # floor of frequency (inf when unbounded)
    verdict: str

    @property
    def v2b_always_cheaper(self) -> bool:
        return self.verdict == "V2B always cheaper"


def break_even_frequency(costs: CostBreakdown, generator_annual: float) -> BreakEven:
    """Outage frequency at which V2B costs as much as one extra generator per year.

    V2B is cheaper for any ``f_out`` below the returned frequency. When the
    installation cost alone exceeds the generator the frequency is the
    ``inf`` sentinel and the verdict says the generator dominates.
    """
    per_outage = costs.C_e + costs.C_r
    if generator_annual < costs.C_i:
        return BreakEven(math.inf, math.inf, "generator dominates")
    if generator_annual == costs.C_i:
        return BreakEven(0.0, 0.0, "break-even at zero outages")
    if per_outage <= 0:
        return BreakEven(math.inf, math.inf, "V2B always cheaper")
    f = (generator_annual - costs.C_i) / per_outage
    return BreakEven(f, float(math.floor(f)), f"V2B cheaper below {f:.2f} outages/year")
