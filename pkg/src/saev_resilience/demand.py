"""Time-of-day Poisson demand: rate estimation, seeded sampling, exact replay.

Sampling uses numpy's Philox4x32-10 counter-based bit generator keyed by the
seed, drawing one ``(N, N)`` Poisson block per step in step order. Any
Philox implementation with the same key reproduces the stream.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .scenario import ModelParams, ScenarioError, TripRecord

DAY_MINUTES = 24 * 60


@dataclass(frozen=True, eq=False)
class RateMatrix:
    """Mean arrivals per model step, ``lam[origin, destination, bucket]``."""

    lam: np.ndarray
    bucket_minutes: int
    tau_minutes: float

    def __post_init__(self):
        lam = np.asarray(self.lam, dtype=float)
        if lam.ndim != 3 or lam.shape[0] != lam.shape[1]:
            raise ScenarioError(f"rate table must be (N, N, buckets), got {lam.shape}")
        if np.any(lam < 0) or not np.all(np.isfinite(lam)):
            raise ScenarioError("rates must be finite and non-negative")
        spb = self.bucket_minutes / self.tau_minutes
        if abs(spb - round(spb)) > 1e-9 or spb < 1:
            raise ScenarioError(
                f"bucket of {self.bucket_minutes} min is not a whole number of {self.tau_minutes}-min steps"
            )
        lam.setflags(write=False)
        object.__setattr__(self, "lam", lam)

    @property
    def n(self) -> int:
        return self.lam.shape[0]

    @property
    def steps_per_bucket(self) -> int:
        return int(round(self.bucket_minutes / self.tau_minutes))

    @property
    def coverage(self) -> int:
        """Number of model steps the buckets span."""
        return self.lam.shape[2] * self.steps_per_bucket

    def per_step(self, L: int) -> np.ndarray:
        """Expand to an ``(N, N, L)`` table of per-step means."""
        if L > self.coverage:
            raise ScenarioError(f"rates cover {self.coverage} steps, {L} requested")
        idx = np.arange(L) // self.steps_per_bucket
        return self.lam[:, :, idx]

    def expected_total(self, L: int) -> float:
        return float(self.per_step(L).sum())

    def scaled(self, factor: float) -> "RateMatrix":
        return RateMatrix(self.lam * factor, self.bucket_minutes, self.tau_minutes)

    def scaled_to(self, total: float, L: int) -> "RateMatrix":
        """Rescale so the expected number of arrivals over ``L`` steps is ``total``."""
        cur = self.expected_total(L)
        if cur <= 0:
            raise ScenarioError("cannot rescale an all-zero rate matrix")
        return self.scaled(total / cur)


@dataclass(frozen=True, eq=False)
class ArrivalMatrix:
    """Integer passenger arrivals ``P[origin, destination, step]``."""

    P: np.ndarray

    def __post_init__(self):
        P = np.asarray(self.P)
        if P.ndim != 3 or P.shape[0] != P.shape[1]:
            raise ScenarioError(f"arrival table must be (N, N, L), got {P.shape}")
        if np.any(P < 0) or np.any(P != np.round(P)):
            raise ScenarioError("arrivals must be non-negative integers")
        P = P.astype(np.int64)
        if np.any(np.einsum("iit->it", P) != 0):
            raise ScenarioError("arrivals on diagonal pairs are not allowed")
        P.setflags(write=False)
        object.__setattr__(self, "P", P)

    @property
    def n(self) -> int:
        return self.P.shape[0]

    @property
    def L(self) -> int:
        return self.P.shape[2]

    @property
    def total(self) -> int:
        return int(self.P.sum())

    def window(self, start: int, length: int) -> np.ndarray:
        """Arrivals for steps ``[start, start + length)``, zero-padded past the end."""
        out = np.zeros((self.n, self.n, length), dtype=np.int64)
        stop = min(self.L, start + length)
        if stop > start:
            out[:, :, : stop - start] = self.P[:, :, start:stop]
        return out

    def __eq__(self, other):
        return isinstance(other, ArrivalMatrix) and np.array_equal(self.P, other.P)

    @classmethod
    def zeros(cls, n: int, L: int) -> "ArrivalMatrix":
        return cls(np.zeros((n, n, L), dtype=np.int64))


def _step_of(seconds: float, tau_minutes: float) -> int:
    return int(math.floor(seconds / 60.0 / tau_minutes + 1e-9))


def estimate_rates(trips: Sequence[TripRecord], params: ModelParams, n_nodes: int | None = None,
                   bucket_minutes: int = 30) -> RateMatrix:
    """Poisson means per step: trips in each (O, D, bucket) over steps per bucket."""
    if not trips:
        raise ScenarioError("cannot estimate rates from an empty trip list")
    n = n_nodes if n_nodes is not None else 1 + max(max(t.origin_node, t.destination_node) for t in trips)
    nb = int(math.ceil(DAY_MINUTES / bucket_minutes))
    counts = np.zeros((n, n, nb))
    for t in trips:
        b = int(t.departure_time // 60 // bucket_minutes) % nb
        counts[t.origin_node, t.destination_node, b] += 1
    spb = bucket_minutes / params.tau_minutes
    return RateMatrix(counts / spb, bucket_minutes, params.tau_minutes)


def sample_arrivals(rates: RateMatrix, seed: int, L: int) -> ArrivalMatrix:
    """Independent Poisson draw per (origin, destination, step) cell."""
    lam = rates.per_step(L)
    rng = np.random.Generator(np.random.Philox(key=int(seed)))
    n = rates.n
    P = np.empty((n, n, L), dtype=np.int64)
    for step in range(L):
        P[:, :, step] = rng.poisson(lam[:, :, step])
    idx = np.arange(n)
    P[idx, idx, :] = 0
    return ArrivalMatrix(P)


def replay_arrivals(trips: Sequence[TripRecord], params: ModelParams, n_nodes: int | None = None) -> ArrivalMatrix:
    """One arrival per trip at step ``floor(departure / tau)``."""
    L = params.horizon_L
    n = n_nodes
    if n is None:
        n = 1 + max((max(t.origin_node, t.destination_node) for t in trips), default=0)
    P = np.zeros((n, n, L), dtype=np.int64)
    late = []
    for t in trips:
        s = _step_of(t.departure_time, params.tau_minutes)
        if s >= L or s < 0:
            late.append((t, s))
            continue
        P[t.origin_node, t.destination_node, s] += 1
    if late:
        shown = "; ".join(f"{t.origin_node}->{t.destination_node} at {t.departure_time:.0f}s (step {s})"
                          for t, s in late[:10])
        raise ScenarioError(f"{len(late)} trips fall outside the horizon L={L}: {shown}")
    return ArrivalMatrix(P)


def write_arrivals(path, arrivals: ArrivalMatrix) -> None:
    """Sparse CSV ``origin,destination,step,count`` preceded by a size comment."""
    P = arrivals.P
    with Path(path).open("w", newline="") as fh:
        fh.write(f"# nodes={arrivals.n} steps={arrivals.L}\n")
        w = csv.writer(fh)
        w.writerow(["origin", "destination", "step", "count"])
        for i, j, s in zip(*np.nonzero(P)):
            w.writerow([int(i), int(j), int(s), int(P[i, j, s])])


def read_arrivals(path, n_nodes: int | None = None, L: int | None = None) -> ArrivalMatrix:
    rows = []
    with Path(path).open(newline="") as fh:
        first = fh.readline()
        if first.startswith("#"):
            meta = dict(kv.split("=") for kv in first[1:].split())
            n_nodes = n_nodes or int(meta["nodes"])
            L = L or int(meta["steps"])
        else:
            fh.seek(0)
        for line_no, row in enumerate(csv.DictReader(fh), start=2):
            try:
                rows.append((int(row["origin"]), int(row["destination"]), int(row["step"]), int(row["count"])))
            except (KeyError, TypeError, ValueError) as exc:
                raise ScenarioError(f"{path}:{line_no}: bad arrival row: {exc}") from None
    if n_nodes is None or L is None:
        n_nodes = n_nodes or 1 + max((max(r[0], r[1]) for r in rows), default=0)
        L = L or 1 + max((r[2] for r in rows), default=-1)
    P = np.zeros((n_nodes, n_nodes, L), dtype=np.int64)
    for i, j, s, c in rows:
        P[i, j, s] += c
    return ArrivalMatrix(P)
