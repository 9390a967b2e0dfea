"""Trip demand: synthetic Poisson generator and trip-log replay."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from datetime import datetime
from pathlib import Path
from typing import Sequence

import numpy as np

from ..hexgrid import HexGrid, TravelTimeModel, axial_round_array, xy_to_axial_frac
from .behavior import DataError
from .entities import TripOrder

TRIP_COLUMNS = ["order_id", "request_ts", "origin_lat", "origin_lon", "dest_lat", "dest_lon", "price", "duration_min"]


def sample_points_in_cells(grid: HexGrid, cells: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Uniform points inside the given hexagons (rejection from the bounding box)."""
    cells = np.asarray(cells, dtype=np.int64)
    out = np.empty((len(cells), 2))
    todo = np.arange(len(cells))
    e = grid.edge_m
    axial = np.array([grid.cell(int(c)).axial for c in range(len(grid))], dtype=np.int64)
    while len(todo):
        c = cells[todo]
        centers = grid.centers_xy[c]
        off = rng.uniform(-1.0, 1.0, size=(len(todo), 2)) * np.array([np.sqrt(3) / 2 * e, e])
        pts = centers + off
        qf, rf = xy_to_axial_frac(pts[:, 0], pts[:, 1], e)
        q, r = axial_round_array(qf, rf)
        ok = (q == axial[c, 0]) & (r == axial[c, 1])
        out[todo[ok]] = pts[ok]
        todo = todo[~ok]
    return out


@dataclass
class DemandModel:
    """Per-cell-hour Poisson requests with a gravity destination choice.

    ``rates`` has shape ``(24, n_cells)`` (requests per hour by origin cell);
    ``attraction`` weights destination cells; the destination kernel decays as
    ``exp(-distance / dest_scale_m)``. Prices are ``base + per_km * km``.
    """

    grid: HexGrid
    travel: TravelTimeModel
    rates: np.ndarray
    attraction: np.ndarray
    dest_scale_m: float = 4000.0
    price_base: float = 2.0
    price_per_km: float = 1.0
    min_trip_min: float = 1.0

    def __post_init__(self):
        n = len(self.grid)
        self.rates = np.asarray(self.rates, dtype=float)
        self.attraction = np.asarray(self.attraction, dtype=float)
        if self.rates.shape != (24, n):
            raise ValueError(f"rates must have shape (24, {n})")
        if self.attraction.shape != (n,):
            raise ValueError(f"attraction must have shape ({n},)")
        valid = self.grid.valid_mask
        if (self.rates[:, ~valid] > 0).any():
            raise ValueError("demand rates must be zero on invalid cells")
        c = self.grid.centers_xy
        d = np.hypot(c[:, None, 0] - c[None, :, 0], c[:, None, 1] - c[None, :, 1])
        w = np.exp(-d / self.dest_scale_m) * np.where(valid, self.attraction, 0.0)[None, :]
        np.fill_diagonal(w, 0.0)
        totals = w.sum(axis=1, keepdims=True)
        self._dest_cdf = np.cumsum(w / np.where(totals > 0, totals, 1.0), axis=1)

    def sample(self, horizon_s: float, start_hour: int, rng: np.random.Generator,
               rate_multiplier: np.ndarray | None = None) -> list[TripOrder]:
        """Draw one episode of orders sorted by request time.

        ``rate_multiplier`` optionally scales rates per (episode hour, cell).
        """
        n_hours = int(np.ceil(horizon_s / 3600.0))
        times, origins = [], []
        for h in range(n_hours):
            span = min(3600.0, horizon_s - h * 3600.0)
            lam = self.rates[(start_hour + h) % 24] * span / 3600.0
            if rate_multiplier is not None:
                lam = lam * rate_multiplier[h]
            counts = rng.poisson(lam)
            cells = np.repeat(np.arange(len(self.grid)), counts)
            times.append(h * 3600.0 + rng.uniform(0.0, span, size=len(cells)))
            origins.append(cells)
        times = np.concatenate(times) if times else np.zeros(0)
        ocells = np.concatenate(origins).astype(np.int64) if origins else np.zeros(0, np.int64)
        order = np.argsort(times, kind="stable")
        times, ocells = times[order], ocells[order]
        u = rng.random(len(ocells))
        dcells = np.array([min(int(np.searchsorted(self._dest_cdf[o], x, side="right")), len(self.grid) - 1)
                           for o, x in zip(ocells.tolist(), u.tolist())], dtype=np.int64)
        oxy = sample_points_in_cells(self.grid, ocells, rng)
        dxy = sample_points_in_cells(self.grid, dcells, rng)
        dist = np.hypot(*(oxy - dxy).T)
        minutes = np.maximum(self.min_trip_min, dist / self.travel.speed_m_per_min)
        prices = self.price_base + self.price_per_km * dist / 1000.0
        orders = []
        for i in range(len(ocells)):
            orders.append(TripOrder(
                id=i, request_time=float(times[i]),
                origin=self.grid.to_latlon(*oxy[i]), destination=self.grid.to_latlon(*dxy[i]),
                price=float(prices[i]), trip_duration=float(minutes[i]),
            ))
        return orders


def save_trips_csv(orders: Sequence[TripOrder], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRIP_COLUMNS)
        for o in orders:
            vals = (o.request_time, *o.origin, *o.destination, o.price, o.trip_duration)
            w.writerow([o.id, *(repr(float(v)) for v in vals)])


def _parse_ts(raw: str, start_hour: int) -> float:
    try:
        return float(raw)
    except ValueError:
        ts = datetime.fromisoformat(raw)
        return ts.hour * 3600 + ts.minute * 60 + ts.second + ts.microsecond / 1e6 - start_hour * 3600


def load_trips_csv(path: str | Path, start_hour: int = 0) -> list[TripOrder]:
    """Read a trip log; ``request_ts`` is seconds since episode start or ISO time of day."""
    orders = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != TRIP_COLUMNS:
            raise DataError(f"{path}:1: expected header {','.join(TRIP_COLUMNS)}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                orders.append(TripOrder(
                    id=int(row[0]), request_time=_parse_ts(row[1], start_hour),
                    origin=(float(row[2]), float(row[3])), destination=(float(row[4]), float(row[5])),
                    price=float(row[6]), trip_duration=float(row[7]),
                ))
            except (ValueError, IndexError) as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
    orders.sort(key=lambda o: (o.request_time, o.id))
    return orders
