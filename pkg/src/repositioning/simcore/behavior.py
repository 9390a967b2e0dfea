"""Passenger cancellation, idle cruising and online/offline churn models."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np


class DataError(ValueError):
    """Malformed input data; message carries the offending line when known."""


@dataclass(frozen=True)
class CancellationModel:
    """Logistic cancellation curve in pick-up distance.

    ``p(d) = floor + (ceiling - floor) * sigmoid(slope * (d - midpoint))`` for
    ``d > grace_m``; at or below ``grace_m`` the probability is ``floor``.
    """

    midpoint_m: float = 2000.0
    slope_per_m: float = 1.0 / 500.0
    floor: float = 0.0
    ceiling: float = 1.0
    grace_m: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.floor <= self.ceiling <= 1.0:
            raise ValueError("need 0 <= floor <= ceiling <= 1")
        if self.slope_per_m < 0:
            raise ValueError("slope must be non-negative for a non-decreasing curve")

    def probability(self, distance_m: float) -> float:
        if distance_m < 0:
            raise ValueError("pick-up distance must be non-negative")
        if distance_m <= self.grace_m:
            return self.floor
        z = self.slope_per_m * (distance_m - self.midpoint_m)
        sig = 1.0 / (1.0 + math.exp(-z)) if z > -700 else 0.0
        return self.floor + (self.ceiling - self.floor) * sig

    def maybe_cancel(self, distance_m: float, rng: np.random.Generator) -> bool:
        return bool(rng.random() < self.probability(distance_m))


@dataclass(frozen=True)
class CruisingModel:
    """Hourly origin-destination transition rows for idle unmanaged drivers."""

    rows: Mapping[tuple[int, int], tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)

    @classmethod
    def from_entries(cls, entries: Iterable[tuple[int, int, int, float]], tol: float = 1e-6) -> "CruisingModel":
        acc: dict[tuple[int, int], dict[int, float]] = {}
        for hour, o, d, p in entries:
            if not 0 <= hour < 24:
                raise DataError(f"hour {hour} out of range")
            if p < 0:
                raise DataError(f"negative probability for ({hour}, {o}, {d})")
            row = acc.setdefault((int(hour), int(o)), {})
            row[int(d)] = row.get(int(d), 0.0) + float(p)
        rows = {}
        for key, row in acc.items():
            total = sum(row.values())
            if abs(total - 1.0) > tol:
                raise DataError(f"cruising row hour={key[0]} origin={key[1]} sums to {total:.6f}, expected 1")
            dests = np.array(sorted(row), dtype=np.int64)
            probs = np.array([row[d] for d in dests.tolist()], dtype=float)
            rows[key] = (dests, probs / probs.sum())
        return cls(rows)

    def next_cell(self, cell: int, hour: int, rng: np.random.Generator) -> int:
        """Draw the next cell; a missing row means the driver stays put."""
        row = self.rows.get((hour % 24, cell))
        if row is None:
            return cell
        dests, probs = row
        return int(dests[rng.choice(len(dests), p=probs)])

    def entries(self):
        for (hour, o), (dests, probs) in sorted(self.rows.items()):
            for d, p in zip(dests.tolist(), probs.tolist()):
                yield hour, o, d, p

    def save_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["hour", "origin_cell", "dest_cell", "prob"])
            for hour, o, d, p in self.entries():
                w.writerow([hour, o, d, repr(p)])

    @classmethod
    def load_csv(cls, path: str | Path) -> "CruisingModel":
        entries = []
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header is None or [h.strip() for h in header] != ["hour", "origin_cell", "dest_cell", "prob"]:
                raise DataError(f"{path}:1: expected header hour,origin_cell,dest_cell,prob")
            for lineno, row in enumerate(reader, start=2):
                try:
                    entries.append((int(row[0]), int(row[1]), int(row[2]), float(row[3])))
                except (ValueError, IndexError) as exc:
                    raise DataError(f"{path}:{lineno}: {exc}") from None
        return cls.from_entries(entries)


@dataclass(frozen=True)
class ChurnModel:
    """Poisson arrivals per cell-hour and an exponential offline hazard.

    ``arrival_rates`` has shape ``(24, n_cells)`` in drivers per hour.
    Managed drivers are exempt from both processes.
    """

    arrival_rates: np.ndarray | None = None
    offline_hazard_per_hour: float = 0.0

    def step(self, hour: int, dt_s: float, online_unmanaged: list[int],
             rng: np.random.Generator) -> tuple[list[int], np.ndarray]:
        """Return ``(drivers going offline, arrivals per cell)`` for one interval."""
        going = []
        if self.offline_hazard_per_hour > 0 and online_unmanaged:
            p_off = 1.0 - math.exp(-self.offline_hazard_per_hour * dt_s / 3600.0)
            draws = rng.random(len(online_unmanaged))
            going = [d for d, u in zip(online_unmanaged, draws.tolist()) if u < p_off]
        if self.arrival_rates is None:
            return going, np.zeros(0, dtype=np.int64)
        lam = np.asarray(self.arrival_rates[hour % 24], dtype=float) * dt_s / 3600.0
        return going, rng.poisson(lam)
