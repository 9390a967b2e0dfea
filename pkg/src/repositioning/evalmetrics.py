"""Income-per-hour, utilization and bootstrap group comparison."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np


class UndefinedMetricError(ValueError):
    pass


@dataclass
class DriverRecord:
    driver_id: int
    income: float
    online_hours: float
    service_hours: float
    managed: bool = False

    def __post_init__(self):
        if self.income < 0:
            raise ValueError(f"driver {self.driver_id}: negative income")
        if not 0 <= self.service_hours <= self.online_hours + 1e-9:
            raise ValueError(f"driver {self.driver_id}: service hours outside [0, online hours]")


@dataclass
class EpisodeMetrics:
    drivers: list[DriverRecord] = field(default_factory=list)
    orders_completed: int = 0
    orders_cancelled: int = 0
    orders_expired: int = 0

    def group(self, managed: bool | None = True) -> list[DriverRecord]:
        if managed is None:
            return list(self.drivers)
        return [d for d in self.drivers if d.managed == managed]

    def iph(self, managed: bool | None = True) -> float:
        return iph_group(self.group(managed))

    def utilization(self, managed: bool | None = True) -> float:
        return utilization(self.group(managed))

    def to_dict(self) -> dict:
        d = asdict(self)
        for key, flag in (("managed", True), ("unmanaged", False), ("all", None)):
            grp = self.group(flag)
            ok = sum(x.online_hours for x in grp) > 0
            d[f"iph_{key}"] = iph_group(grp) if ok else None
            d[f"utilization_{key}"] = utilization(grp) if ok else None
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EpisodeMetrics":
        return cls(
            drivers=[DriverRecord(**x) for x in d["drivers"]],
            orders_completed=d.get("orders_completed", 0),
            orders_cancelled=d.get("orders_cancelled", 0),
            orders_expired=d.get("orders_expired", 0),
        )


def iph_individual(x: DriverRecord) -> float:
    if x.online_hours <= 0:
        raise UndefinedMetricError(f"driver {x.driver_id} has no online hours")
    return x.income / x.online_hours


def iph_group(group: Iterable[DriverRecord]) -> float:
    """Ratio of summed income to summed online hours (not a mean of ratios)."""
    group = list(group)
    hours = sum(x.online_hours for x in group)
    if hours <= 0:
        raise UndefinedMetricError("group has no online hours")
    return sum(x.income for x in group) / hours


def utilization(group: Iterable[DriverRecord]) -> float:
    group = list(group)
    hours = sum(x.online_hours for x in group)
    if hours <= 0:
        raise UndefinedMetricError("group has no online hours")
    return sum(x.service_hours for x in group) / hours


def clip_to_window(trips: Sequence[tuple[int, float, float, float]],
                   status_intervals: Sequence[tuple[int, str, float, float]],
                   start_s: float, end_s: float,
                   managed: dict[int, bool] | None = None) -> list[DriverRecord]:
    """Rebuild driver records restricted to ``[start_s, end_s)``.

    ``trips`` holds ``(driver_id, service_start, service_end, price)``; income
    counts when the trip completes inside the window. ``status_intervals``
    holds ``(driver_id, status, t0, t1)``.
    """
    managed = managed or {}
    income: dict[int, float] = {}
    online: dict[int, float] = {}
    service: dict[int, float] = {}
    for drv, status, t0, t1 in status_intervals:
        lo, hi = max(t0, start_s), min(t1, end_s)
        if hi <= lo or status == "offline":
            continue
        online[drv] = online.get(drv, 0.0) + (hi - lo)
        if status == "serving":
            service[drv] = service.get(drv, 0.0) + (hi - lo)
    for drv, _t0, t1, price in trips:
        if start_s <= t1 < end_s:
            income[drv] = income.get(drv, 0.0) + price
    return [
        DriverRecord(d, income.get(d, 0.0), online[d] / 3600.0, service.get(d, 0.0) / 3600.0, managed.get(d, False))
        for d in sorted(online)
    ]


@dataclass
class BootstrapReport:
    metric: str
    observed: float
    ci_low: float
    ci_high: float
    n_resamples: int
    seed: int
    significant: bool

    def to_json(self) -> str:
        return json.dumps(asdict(self))


METRICS: dict[str, Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]] = {
    # each takes summed (income, online, service) arrays over resampled groups
    "iph": lambda inc, onl, srv: inc / onl,
    "utilization": lambda inc, onl, srv: srv / onl,
}


def bootstrap_compare(
    experiment: Sequence[DriverRecord],
    control_pool: Sequence[DriverRecord],
    n_resamples: int = 5000,
    metric: str = "iph",
    seed: int = 0,
    level: float = 0.95,
) -> BootstrapReport:
    """Percentile bootstrap of a group metric over control groups of size |X|.

    The experiment group's value is significant when it falls outside the
    central ``level`` interval of the resampled control-group values.
    """
    if not control_pool:
        raise ValueError("control pool is empty")
    if not experiment:
        raise ValueError("experiment group is empty")
    if len(control_pool) < len(experiment):
        raise ValueError("control pool must be at least as large as the experiment group")
    if metric not in METRICS:
        raise ValueError(f"unknown metric {metric!r}")
    fn = METRICS[metric]
    x_inc = np.array([x.income for x in experiment])
    x_onl = np.array([x.online_hours for x in experiment])
    x_srv = np.array([x.service_hours for x in experiment])
    observed = float(fn(x_inc.sum(), x_onl.sum(), x_srv.sum()))

    inc = np.array([x.income for x in control_pool])
    onl = np.array([x.online_hours for x in control_pool])
    srv = np.array([x.service_hours for x in control_pool])
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, len(control_pool), size=(n_resamples, len(experiment)))
    samples = fn(inc[idx].sum(axis=1), onl[idx].sum(axis=1), srv[idx].sum(axis=1))
    alpha = (1.0 - level) / 2.0
    lo, hi = np.quantile(samples, [alpha, 1.0 - alpha])
    return BootstrapReport(metric, observed, float(lo), float(hi), int(n_resamples), int(seed),
                           bool(observed < lo or observed > hi))
