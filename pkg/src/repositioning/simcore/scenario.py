"""Synthetic cities: hexagonal grid, hotspot demand, cruising table and fleet settings."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Optional

import numpy as np

from ..hexgrid import HexGrid, TravelTimeModel
from .behavior import CancellationModel, ChurnModel, CruisingModel
from .demand import DemandModel
from .engine import SimConfig, episode_streams


@dataclass(frozen=True)
class ScenarioConfig:
    radius: int = 8  # hexagon of 1 + 3 R (R + 1) cells
    edge_m: float = 800.0
    origin: tuple[float, float] = (30.0, 120.0)
    invalid_fraction: float = 0.05
    speed_m_per_min: float = 400.0
    # demand
    background_rate: float = 0.3  # requests per hour per valid cell
    n_hotspots: int = 4
    hotspot_peak: float = 12.0  # requests per hour at a hotspot centre at full intensity
    hotspot_sigma_m: float = 1500.0
    hotspot_min_intensity: float = 0.1
    dest_scale_m: float = 4000.0
    price_base: float = 2.0
    price_per_km: float = 1.0
    # supply
    n_drivers: int = 50
    n_managed: int = 10
    horizon_h: float = 8.0
    start_hour: int = 16
    max_pickup_m: Optional[float] = 3000.0
    order_patience_min: float = 5.0
    cancel_midpoint_m: float = 2000.0
    cancel_slope_per_m: float = 1.0 / 500.0
    cancel_grace_m: float = 0.0
    reposition_cost_per_min: float = 0.0
    cruise_stay_prob: float = 0.4
    churn_arrivals_per_hour: float = 0.0  # city-wide, spread over valid cells
    churn_offline_hazard_per_hour: float = 0.0
    seed: int = 0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["origin"] = list(self.origin)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown scenario keys: {sorted(unknown)}")
        d = dict(d)
        if "origin" in d:
            d["origin"] = tuple(d["origin"])
        return cls(**d)


@dataclass
class Scenario:
    config: ScenarioConfig
    grid: HexGrid
    travel: TravelTimeModel
    demand: DemandModel
    cruising: CruisingModel
    churn: ChurnModel
    driver_weights: np.ndarray

    def sim_config(self, seed: int, **overrides) -> SimConfig:
        c = self.config
        kw = dict(
            horizon_s=c.horizon_h * 3600.0, start_hour=c.start_hour, seed=seed,
            n_drivers=c.n_drivers, n_managed=c.n_managed, order_patience_min=c.order_patience_min,
            max_pickup_m=c.max_pickup_m, reposition_cost_per_min=c.reposition_cost_per_min,
            cancellation=CancellationModel(c.cancel_midpoint_m, c.cancel_slope_per_m, grace_m=c.cancel_grace_m),
            cruising=self.cruising, churn=self.churn,
        )
        kw.update(overrides)
        return SimConfig(**kw)

    def orders(self, seed: int, horizon_s: float | None = None):
        """Demand for the episode with this seed (its own named random stream)."""
        horizon = self.config.horizon_h * 3600.0 if horizon_s is None else horizon_s
        return self.demand.sample(horizon, self.config.start_hour, episode_streams(seed)["demand"])

    def save(self, directory: str | Path) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        self.grid.save(d / "grid.json")
        np.savez(d / "demand.npz", rates=self.demand.rates, attraction=self.demand.attraction,
                 driver_weights=self.driver_weights,
                 arrival_rates=np.zeros(0) if self.churn.arrival_rates is None else self.churn.arrival_rates)
        self.cruising.save_csv(d / "cruising.csv")
        (d / "scenario.json").write_text(json.dumps(self.config.to_dict(), indent=2, sort_keys=True))

    @classmethod
    def load(cls, directory: str | Path) -> "Scenario":
        d = Path(directory)
        config = ScenarioConfig.from_dict(json.loads((d / "scenario.json").read_text()))
        grid = HexGrid.load(d / "grid.json")
        travel = TravelTimeModel(grid, config.speed_m_per_min)
        with np.load(d / "demand.npz") as z:
            rates, attraction, weights, arrivals = z["rates"], z["attraction"], z["driver_weights"], z["arrival_rates"]
        demand = DemandModel(grid, travel, rates, attraction, config.dest_scale_m, config.price_base,
                             config.price_per_km)
        churn = ChurnModel(arrivals if arrivals.size else None, config.churn_offline_hazard_per_hour)
        return cls(config, grid, travel, demand, CruisingModel.load_csv(d / "cruising.csv"), churn, weights)


def _hotspot_profiles(rng: np.random.Generator, n: int, floor: float) -> np.ndarray:
    """``(24, n)`` hourly intensities in ``[floor, 1]``: one smooth bump per hotspot at a random hour."""
    hours = np.arange(24)
    peaks = rng.uniform(0, 24, size=n)
    widths = rng.uniform(2.0, 5.0, size=n)
    d = np.abs(hours[:, None] - peaks[None, :])
    d = np.minimum(d, 24 - d)
    return floor + (1 - floor) * np.exp(-0.5 * (d / widths) ** 2)


def generate_city(config: ScenarioConfig) -> Scenario:
    rng = np.random.default_rng(config.seed)
    grid = HexGrid.hexagon(config.radius, config.edge_m, config.origin)
    n = len(grid)
    # invalid cells ("lakes"): never the centre ring, so the city stays connected in practice
    ring = np.array([max(abs(q), abs(r), abs(q + r)) for q, r in (c.axial for c in grid.cells)])
    eligible = np.flatnonzero(ring >= 2)
    n_invalid = int(round(config.invalid_fraction * n))
    invalid_ids = rng.choice(eligible, size=min(n_invalid, len(eligible)), replace=False) if n_invalid else []
    invalid = [grid.cell(int(i)).axial for i in sorted(invalid_ids)]
    grid = HexGrid.hexagon(config.radius, config.edge_m, config.origin, invalid=invalid)
    travel = TravelTimeModel(grid, config.speed_m_per_min)
    valid = grid.valid_mask

    centers = rng.choice(np.flatnonzero(valid), size=config.n_hotspots, replace=False) if config.n_hotspots else []
    prof = _hotspot_profiles(rng, config.n_hotspots, config.hotspot_min_intensity)
    xy = grid.centers_xy
    rates = np.full((24, n), config.background_rate)
    attraction = np.ones(n)
    for k, c in enumerate(np.asarray(centers, dtype=np.int64).tolist()):
        d2 = np.sum((xy - xy[c]) ** 2, axis=1)
        bump = np.exp(-0.5 * d2 / config.hotspot_sigma_m ** 2)
        rates += config.hotspot_peak * prof[:, k][:, None] * bump[None, :]
        attraction += 3.0 * bump
    rates[:, ~valid] = 0.0
    demand = DemandModel(grid, travel, rates, attraction, config.dest_scale_m, config.price_base, config.price_per_km)

    entries = []
    for c in np.flatnonzero(valid).tolist():
        nbrs = grid.neighbors(c)
        if not nbrs:
            continue
        move = (1.0 - config.cruise_stay_prob) / len(nbrs)
        for h in range(24):
            entries.append((h, c, c, config.cruise_stay_prob))
            entries.extend((h, c, nb, move) for nb in nbrs)
    cruising = CruisingModel.from_entries(entries)

    arrival = None
    if config.churn_arrivals_per_hour > 0:
        arrival = np.zeros((24, n))
        arrival[:, valid] = config.churn_arrivals_per_hour / valid.sum()
    churn = ChurnModel(arrival, config.churn_offline_hazard_per_hour)
    weights = rates[config.start_hour % 24].copy()
    return Scenario(config, grid, travel, demand, cruising, churn, weights)


def reference_city(seed: int = 0, **overrides) -> Scenario:
    """~200 cells, 50 drivers of which 10 are managed, 8 h horizon."""
    return generate_city(replace(ScenarioConfig(seed=seed), **overrides))


HOTSPOT_OVERRIDES = {"n_drivers": 60, "n_managed": 30, "background_rate": 0.1, "n_hotspots": 3,
                     "hotspot_peak": 30.0, "hotspot_sigma_m": 1000.0, "max_pickup_m": 1000.0}


def hotspot_city(seed: int = 0, **overrides) -> Scenario:
    """Demand concentrated in a few strong hotspots and a large managed share of the fleet."""
    return generate_city(replace(ScenarioConfig(seed=seed, **HOTSPOT_OVERRIDES), **overrides))
