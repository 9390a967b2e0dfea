"""Discrete-time event loop of the ride-hailing marketplace.

Dispatch reviews run every matching window; reposition reviews every review
interval.  Reposition-managed drivers follow the policy under test and never
churn; all other drivers cruise according to the idle cruising model.
"""
from __future__ import annotations

import heapq
import logging
import math
import time
from collections import deque
from dataclasses import asdict, dataclass, field, fields
from typing import Optional, Sequence

import numpy as np

from ..evalmetrics import DriverRecord, EpisodeMetrics
from ..hexgrid import HexGrid, TravelTimeModel
from .behavior import CancellationModel, ChurnModel, CruisingModel
from .entities import (IDLE, OFFLINE, REPOSITIONING, SERVING, DriverAgent, DriverState,
                       OptionRecord, SDContext, TransitionRecord, TripOrder)
from .matching import match_batch
from .policy import Destination, PolicyError, RepositionPolicy, ReviewRequest

log = logging.getLogger(__name__)

STREAMS = ("init", "cancel", "cruise", "churn", "policy", "demand")


def episode_streams(seed: int) -> dict[str, np.random.Generator]:
    """Independent named generators derived from a single episode seed."""
    children = np.random.SeedSequence(seed).spawn(len(STREAMS))
    return {name: np.random.default_rng(ss) for name, ss in zip(STREAMS, children)}


@dataclass
class SimConfig:
    matching_window_s: float = 2.0
    review_interval_s: float = 100.0
    idle_threshold_min: float = 5.0
    horizon_s: float = 8 * 3600.0
    start_hour: int = 16
    seed: int = 0
    n_drivers: int = 50
    n_managed: int = 10
    order_patience_min: float = 5.0
    max_pickup_m: Optional[float] = None
    reposition_cost_per_min: float = 0.0
    step_s: float = 60.0
    gamma: float = 0.92
    churn_interval_s: float = 300.0
    sd_window_s: float = 600.0
    record_sd_context: bool = False
    log_unmanaged: bool = True
    cancellation: CancellationModel = field(default_factory=CancellationModel)
    cruising: CruisingModel = field(default_factory=CruisingModel)
    churn: ChurnModel = field(default_factory=ChurnModel)

    def __post_init__(self):
        for name in ("matching_window_s", "review_interval_s", "idle_threshold_min", "horizon_s",
                     "step_s", "churn_interval_s", "sd_window_s", "order_patience_min"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.idle_threshold_min * 60.0 < self.review_interval_s:
            raise ValueError("idle threshold L must be at least one review interval")
        if not 0 <= self.n_managed <= self.n_drivers:
            raise ValueError("managed fleet must fit in the driver population")
        if not 0 < self.gamma < 1:
            raise ValueError("gamma must lie in (0, 1)")

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)
             if f.name not in ("cancellation", "cruising", "churn")}
        d["cancellation"] = asdict(self.cancellation)
        d["churn_offline_hazard_per_hour"] = self.churn.offline_hazard_per_hour
        return d

    @classmethod
    def from_dict(cls, d: dict, cruising: CruisingModel | None = None,
                  churn: ChurnModel | None = None) -> "SimConfig":
        known = {f.name for f in fields(cls)} - {"cancellation", "cruising", "churn"}
        unknown = set(d) - known - {"cancellation", "churn_offline_hazard_per_hour"}
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        kw = {k: v for k, v in d.items() if k in known}
        if "cancellation" in d:
            kw["cancellation"] = CancellationModel(**d["cancellation"])
        kw["cruising"] = cruising or CruisingModel()
        kw["churn"] = churn or ChurnModel(offline_hazard_per_hour=d.get("churn_offline_hazard_per_hour", 0.0))
        return cls(**kw)


@dataclass(frozen=True)
class TrajectoryEvent:
    driver_id: int
    kind: str  # online | offline | dispatch | idle_start
    time: float
    location: tuple[float, float]
    cell: int


@dataclass
class _Reposition:
    start: DriverState
    origin_xy: tuple[float, float]
    dest_xy: tuple[float, float]
    origin_cell: int
    dest_cell: int
    direction: Optional[int]
    t0: float
    t1: float
    stay: bool
    token: int


@dataclass
class _Trip:
    order: TripOrder
    start: DriverState
    dest_xy: tuple[float, float]
    t_done: float
    total_min: float


@dataclass
class _Decision:
    state: DriverState
    option_index: Optional[int]
    dest_cell: int
    t: float
    acc_raw: float = 0.0
    acc_cost: float = 0.0
    acc_disc: float = 0.0


@dataclass
class EpisodeResult:
    metrics: EpisodeMetrics
    transitions: list[TransitionRecord]
    decisions: list[TransitionRecord]
    events: list[TrajectoryEvent]
    trips: list[tuple[int, float, float, float]]
    status_log: list[tuple[int, str, float, float]]
    order_status: dict[int, str]
    cpu_seconds: float
    policy_cpu_seconds: float
    n_reviews: int
    config: dict
    seed: int


class SimView:
    """Read-only window on the simulator handed to policies at a review tick."""

    def __init__(self, sim: "Simulator"):
        self._sim = sim
        self.grid = sim.grid
        self.travel = sim.travel
        self.config = sim.config

    @property
    def now(self) -> float:
        return self._sim.now

    @property
    def hour(self) -> int:
        return int(self.config.start_hour + self._sim.now // 3600) % 24

    @property
    def horizon_s(self) -> float:
        return self.config.horizon_s

    def sd_counts(self) -> np.ndarray:
        """``(n_cells, 3)`` array of (idle drivers, requests, unassigned requests)."""
        return self._sim.sd_snapshot()

    def gap(self, cell: int) -> float:
        idle, _req, unassigned = self.sd_counts()[cell]
        return float(unassigned - idle)

    def sd_context(self, cell: int) -> SDContext:
        counts = self.sd_counts()
        slots = [tuple(float(x) for x in counts[cell])]
        for n in self.grid.adjacency[cell].tolist():
            slots.append(tuple(float(x) for x in counts[n]) if n >= 0 else (0.0, 0.0, 0.0))
        return SDContext(tuple(slots))


class Simulator:
    def __init__(self, grid: HexGrid, travel: TravelTimeModel, config: SimConfig,
                 policy: RepositionPolicy, orders: Sequence[TripOrder],
                 driver_weights: np.ndarray | None = None,
                 rngs: dict[str, np.random.Generator] | None = None):
        self.grid = grid
        self.travel = travel
        self.config = config
        self.policy = policy
        self.orders = sorted(orders, key=lambda o: (o.request_time, o.id))
        self.rngs = rngs or episode_streams(config.seed)
        self.view = SimView(self)
        self.now = 0.0
        self._heap: list = []
        self._seq = 0
        self._next_order = 0
        self.open_orders: dict[int, tuple[TripOrder, tuple[float, float], int]] = {}
        self.order_status: dict[int, str] = {}
        self._sd_window: deque = deque()
        self._assigned: set[int] = set()
        self._sd_cache: np.ndarray | None = None

        self.transitions: list[TransitionRecord] = []
        self.decisions: list[TransitionRecord] = []
        self.events: list[TrajectoryEvent] = []
        self.trips: list[tuple[int, float, float, float]] = []
        self.status_log: list[tuple[int, str, float, float]] = []
        self.policy_cpu = 0.0
        self.n_reviews = 0

        valid = np.flatnonzero(grid.valid_mask)
        if driver_weights is None:
            w = np.ones(len(valid))
        else:
            w = np.asarray(driver_weights, dtype=float)[valid]
            w = w if w.sum() > 0 else np.ones(len(valid))
        cells = self.rngs["init"].choice(valid, size=config.n_drivers, p=w / w.sum())
        self.drivers: list[DriverAgent] = []
        for i, c in enumerate(cells.tolist()):
            self._add_driver(int(c), managed=i < config.n_managed, now=0.0)

    # -- helpers ------------------------------------------------------------

    def _add_driver(self, cell: int, managed: bool, now: float) -> DriverAgent:
        xy = tuple(self.grid.representative_xy[cell])
        d = DriverAgent(id=len(self.drivers), managed=managed, xy=xy, cell=cell,
                        status_since=now, idle_since=now, idle_streak_start=now)
        self.drivers.append(d)
        self.events.append(TrajectoryEvent(d.id, "online", now, self.grid.to_latlon(*xy), cell))
        return d

    def _push(self, t: float, kind: str, driver: int, token: int) -> None:
        self._seq += 1
        heapq.heappush(self._heap, (t, self._seq, kind, driver, token))

    def _set_status(self, d: DriverAgent, status: str, now: float) -> None:
        if now > d.status_since:
            self.status_log.append((d.id, d.status, d.status_since, now))
        d.set_status(status, now)

    def _position(self, d: DriverAgent, now: float) -> tuple[float, float]:
        opt = d.option
        if d.status == REPOSITIONING and isinstance(opt, _Reposition):
            span = opt.t1 - opt.t0
            f = 1.0 if span <= 0 else min(1.0, max(0.0, (now - opt.t0) / span))
            return (opt.origin_xy[0] + f * (opt.dest_xy[0] - opt.origin_xy[0]),
                    opt.origin_xy[1] + f * (opt.dest_xy[1] - opt.origin_xy[1]))
        return d.xy

    def _state(self, xy, now: float, cell: int | None = None, sd: bool = False) -> DriverState:
        if cell is None:
            cell = self.grid.locate_xy(*xy)
        ctx = self.view.sd_context(cell) if sd else None
        return DriverState(self.grid.to_latlon(*xy), cell, now, ctx)

    def _credit(self, d: DriverAgent, reward: float, t: float, cost: float = 0.0) -> None:
        dec = d.decision
        if dec is not None:
            dec.acc_raw += reward
            dec.acc_cost += cost
            dec.acc_disc += reward * self.config.gamma ** ((t - dec.t) / self.config.step_s)

    def _steps(self, seconds: float) -> int:
        return max(1, int(round(seconds / self.config.step_s)))

    def _log_transition(self, d: DriverAgent, rec: TransitionRecord) -> None:
        if d.managed or self.config.log_unmanaged:
            self.transitions.append(rec)

    def sd_snapshot(self) -> np.ndarray:
        if self._sd_cache is None:
            n = len(self.grid)
            counts = np.zeros((n, 3))
            for d in self.drivers:
                if d.status == IDLE:
                    counts[d.cell, 0] += 1
                elif d.status == REPOSITIONING:
                    counts[d.option.dest_cell, 0] += 1
            for _t, cell, oid in self._sd_window:
                counts[cell, 1] += 1
                if oid not in self._assigned:
                    counts[cell, 2] += 1
            self._sd_cache = counts
        return self._sd_cache

    # -- options ------------------------------------------------------------

    def _direction(self, origin: int, dest: int) -> Optional[int]:
        if origin == dest:
            return 0
        row = self.grid.adjacency[origin].tolist()
        return row.index(dest) + 1 if dest in row else None

    def _start_option(self, d: DriverAgent, decision, now: float, state: DriverState) -> Optional[int]:
        if isinstance(decision, Destination):
            cell, point = int(decision.cell), decision.point
        else:
            cell, point = int(decision), None
        if not (0 <= cell < len(self.grid)) or not self.grid.valid_mask[cell]:
            raise PolicyError(f"driver {d.id} at t={now:.0f}s: destination {cell} is not a valid cell")
        dest_xy = tuple(self.grid.representative_xy[cell]) if point is None else self.grid.to_xy(*point)
        direction = self._direction(d.cell, cell)
        d.token += 1
        d.idle_since = now
        if cell == d.cell and point is None:
            t1 = now + self.config.idle_threshold_min * 60.0
            d.option = _Reposition(state, d.xy, d.xy, d.cell, cell, 0, now, t1, True, d.token)
            self._push(t1, "stay_end", d.id, d.token)
        else:
            eta_s = float(self.travel.eta_xy(d.xy, dest_xy)) * 60.0
            t1 = now + eta_s
            d.option = _Reposition(state, d.xy, dest_xy, d.cell, cell, direction, now, t1, False, d.token)
            self._set_status(d, REPOSITIONING, now)
            self._push(t1, "repo_arrive", d.id, d.token)
        return direction

    def _close_reposition(self, d: DriverAgent, now: float, xy, terminal: bool = False) -> None:
        opt: _Reposition = d.option
        elapsed = now - opt.t0
        cost = 0.0 if opt.stay else self.config.reposition_cost_per_min * elapsed / 60.0
        cell = opt.dest_cell if (now >= opt.t1 and not opt.stay) else self.grid.locate_xy(*xy)
        s_next = self._state(xy, now, cell)
        rec = TransitionRecord(
            s=opt.start,
            option=OptionRecord("reposition", opt.dest_cell, elapsed / 60.0, cost=cost, direction=opt.direction),
            reward=-cost, k=self._steps(elapsed), s_next=s_next,
            terminal=terminal or now >= self.config.horizon_s, driver_id=d.id, managed=d.managed,
        )
        self._log_transition(d, rec)
        self._credit(d, -cost, now, cost)
        d.option = None

    def _close_decision(self, d: DriverAgent, now: float, s_next: DriverState,
                        next_option: Optional[int], terminal: bool) -> None:
        dec: _Decision = d.decision
        if dec is None:
            return
        self.policy.observe(d.id, dec.state.cell, dec.option_index, dec.acc_disc)
        if dec.option_index is not None:
            self.decisions.append(TransitionRecord(
                s=dec.state,
                option=OptionRecord("reposition", dec.dest_cell, (now - dec.t) / 60.0,
                                    cost=dec.acc_cost, direction=dec.option_index),
                reward=dec.acc_raw, k=self._steps(now - dec.t), s_next=s_next,
                terminal=terminal, driver_id=d.id, managed=True, next_option=next_option,
            ))
        d.decision = None

    # -- event handling -----------------------------------------------------

    def _process_events(self, until: float) -> None:
        while self._heap and self._heap[0][0] <= until:
            t, _seq, kind, did, token = heapq.heappop(self._heap)
            d = self.drivers[did]
            if kind == "trip_done":
                trip: _Trip = d.option
                d.xy = trip.dest_xy
                d.cell = self.grid.locate_xy(*trip.dest_xy)
                d.income += trip.order.price
                self.order_status[trip.order.id] = "completed"
                s_next = self._state(d.xy, t, d.cell)
                self._log_transition(d, TransitionRecord(
                    s=trip.start,
                    option=OptionRecord("dispatch", trip.order.id, trip.total_min, price=trip.order.price),
                    reward=trip.order.price, k=self._steps(t - trip.start.time), s_next=s_next,
                    terminal=t >= self.config.horizon_s, driver_id=d.id, managed=d.managed,
                ))
                self._credit(d, trip.order.price, t)
                d.option = None
                self._set_status(d, IDLE, t)
                d.idle_since = t
                d.idle_streak_start = t
                d.idle_start_logged = False
            elif kind in ("repo_arrive", "stay_end"):
                if d.option is None or not isinstance(d.option, _Reposition) or d.option.token != token:
                    continue
                dest = d.option.dest_xy
                self._close_reposition(d, t, dest)
                d.xy = dest
                d.cell = self.grid.locate_xy(*dest)
                if d.status == REPOSITIONING:
                    self._set_status(d, IDLE, t)

    def _release_orders(self, now: float) -> None:
        while self._next_order < len(self.orders) and self.orders[self._next_order].request_time <= now:
            o = self.orders[self._next_order]
            self._next_order += 1
            xy = self.grid.to_xy(*o.origin)
            cell = self.grid.locate_xy(*xy)
            self.open_orders[o.id] = (o, xy, cell)
            self._sd_window.append((o.request_time, cell, o.id))
        cutoff = now - self.config.sd_window_s
        while self._sd_window and self._sd_window[0][0] < cutoff:
            self._sd_window.popleft()

    def _expire_orders(self, now: float) -> None:
        limit = self.config.order_patience_min * 60.0
        for oid in [oid for oid, (o, _xy, _c) in self.open_orders.items() if now - o.request_time > limit]:
            del self.open_orders[oid]
            self.order_status[oid] = "expired"

    def _match(self, now: float) -> None:
        avail = [d for d in self.drivers if d.status in (IDLE, REPOSITIONING)]
        if not avail:
            return
        orders = sorted(self.open_orders.values(), key=lambda x: (x[0].request_time, x[0].id))
        dxy = np.array([self._position(d, now) for d in avail])
        oxy = np.array([x[1] for x in orders])
        trip_min = np.array([x[0].trip_duration for x in orders])
        dist = np.hypot(dxy[:, None, 0] - oxy[None, :, 0], dxy[:, None, 1] - oxy[None, :, 1])
        pickup_min = dist / self.travel.speed_m_per_min
        feasible = now + (pickup_min + trip_min[None, :]) * 60.0 <= self.config.horizon_s
        pairs = match_batch(dxy, oxy, self.config.max_pickup_m, feasible)
        for i, j in sorted(pairs):
            d, order = avail[i], orders[j][0]
            del self.open_orders[order.id]
            self._assigned.add(order.id)
            self._sd_cache = None
            if self.config.cancellation.maybe_cancel(float(dist[i, j]), self.rngs["cancel"]):
                self.order_status[order.id] = "cancelled"
                continue
            self._dispatch(d, order, tuple(dxy[i]), float(pickup_min[i, j]), now)

    def _dispatch(self, d: DriverAgent, order: TripOrder, xy, pickup_min: float, now: float) -> None:
        cell = self.grid.locate_xy(*xy)
        opt = d.option
        if isinstance(opt, _Reposition):
            if cell == opt.origin_cell and not (now >= opt.t1 and not opt.stay):
                d.option = None  # the reposition is treated as never having taken place
            else:
                self._close_reposition(d, now, xy)
        self.events.append(TrajectoryEvent(d.id, "dispatch", now, self.grid.to_latlon(*xy), cell))
        start = self._state(xy, now, cell)
        total = pickup_min + order.trip_duration
        t_done = now + total * 60.0
        d.xy = xy
        d.cell = cell
        d.token += 1
        d.option = _Trip(order, start, self.grid.to_xy(*order.destination), t_done, total)
        self._set_status(d, SERVING, now)
        d.idle_since = now
        self.trips.append((d.id, now, t_done, order.price))
        self._push(t_done, "trip_done", d.id, d.token)

    # -- reviews ------------------------------------------------------------

    def _review(self, now: float) -> None:
        cfg = self.config
        L = cfg.idle_threshold_min * 60.0
        for d in self.drivers:
            if d.status in (IDLE, REPOSITIONING) and not d.idle_start_logged and now - d.idle_streak_start >= L:
                d.idle_start_logged = True
                xy = self._position(d, now)
                self.events.append(TrajectoryEvent(d.id, "idle_start", now, self.grid.to_latlon(*xy),
                                                   self.grid.locate_xy(*xy)))
        ready = [d for d in self.drivers if d.status == IDLE and d.option is None and now - d.idle_since >= L]
        managed = [d for d in ready if d.managed]
        if managed:
            sd = cfg.record_sd_context or self.policy.needs_sd_context
            requests = [ReviewRequest(d.id, self._state(d.xy, now, d.cell, sd=sd),
                                      (now - d.idle_streak_start) / 60.0) for d in managed]
            t0 = time.process_time()
            try:
                choices = self.policy.decide_batch(requests, self.view, self.rngs["policy"])
            except Exception as exc:
                raise PolicyError(f"policy {self.policy.name!r} failed at t={now:.0f}s: {exc}") from exc
            self.policy_cpu += time.process_time() - t0
            if len(choices) != len(requests):
                raise PolicyError(f"policy {self.policy.name!r} answered {len(choices)} of {len(requests)} reviews")
            self.n_reviews += len(requests)
            for d, req, choice in zip(managed, requests, choices):
                cell = choice.cell if isinstance(choice, Destination) else int(choice)
                option_index = self._direction(d.cell, cell) if 0 <= cell < len(self.grid) else None
                self._close_decision(d, now, req.state, option_index, terminal=False)
                self._start_option(d, choice, now, req.state)
                d.decision = _Decision(req.state, option_index, cell, now)
        hour = int(cfg.start_hour + now // 3600) % 24
        for d in ready:
            if d.managed:
                continue
            nxt = cfg.cruising.next_cell(d.cell, hour, self.rngs["cruise"])
            if not self.grid.valid_mask[nxt]:
                nxt = d.cell
            self._start_option(d, nxt, now, self._state(d.xy, now, d.cell))

    def _churn(self, now: float) -> None:
        cfg = self.config
        hour = int(cfg.start_hour + now // 3600) % 24
        candidates = [d.id for d in self.drivers if not d.managed and d.status == IDLE]
        going, arrivals = cfg.churn.step(hour, cfg.churn_interval_s, candidates, self.rngs["churn"])
        for did in going:
            d = self.drivers[did]
            d.option = None
            d.token += 1
            self._set_status(d, OFFLINE, now)
            self.events.append(TrajectoryEvent(d.id, "offline", now, self.grid.to_latlon(*d.xy), d.cell))
        for cell in np.repeat(np.arange(len(arrivals)), arrivals).tolist():
            if self.grid.valid_mask[cell]:
                self._add_driver(int(cell), managed=False, now=now)
        self._sd_cache = None

    # -- main loop ----------------------------------------------------------

    def run(self) -> EpisodeResult:
        cfg = self.config
        cpu0 = time.process_time()
        n_ticks = int(math.ceil(cfg.horizon_s / cfg.matching_window_s))
        review_every = max(1, int(round(cfg.review_interval_s / cfg.matching_window_s)))
        churn_every = max(1, int(round(cfg.churn_interval_s / cfg.matching_window_s)))
        self.policy.begin_episode(self.view)
        for i in range(n_ticks):
            now = i * cfg.matching_window_s
            self.now = now
            self._sd_cache = None
            self._process_events(now)
            self._release_orders(now)
            self._expire_orders(now)
            if i and i % churn_every == 0:
                self._churn(now)
            if self.open_orders:
                self._match(now)
            if i % review_every == 0:
                self._review(now)
        return self._finalize(time.process_time() - cpu0)

    def _finalize(self, cpu: float) -> EpisodeResult:
        H = self.config.horizon_s
        self.now = H
        self._sd_cache = None
        self._process_events(H)
        for d in self.drivers:
            if d.status == OFFLINE:
                continue
            xy = self._position(d, H)
            if isinstance(d.option, _Reposition):
                self._close_reposition(d, H, xy, terminal=True)
            if d.decision is not None:
                self._close_decision(d, H, self._state(xy, H), None, terminal=True)
            self._set_status(d, d.status, H)
        for oid in list(self.open_orders):
            self.order_status[oid] = "expired"
        self.open_orders.clear()
        for o in self.orders[self._next_order:]:
            self.order_status[o.id] = "expired"
        counts = {"completed": 0, "cancelled": 0, "expired": 0}
        for status in self.order_status.values():
            counts[status] += 1
        metrics = EpisodeMetrics(
            drivers=[DriverRecord(d.id, d.income, d.online_seconds / 3600.0, d.seconds[SERVING] / 3600.0, d.managed)
                     for d in self.drivers],
            orders_completed=counts["completed"], orders_cancelled=counts["cancelled"],
            orders_expired=counts["expired"],
        )
        return EpisodeResult(
            metrics=metrics, transitions=self.transitions, decisions=self.decisions, events=self.events,
            trips=self.trips, status_log=self.status_log, order_status=self.order_status,
            cpu_seconds=cpu, policy_cpu_seconds=self.policy_cpu, n_reviews=self.n_reviews,
            config=self.config.to_dict(), seed=self.config.seed,
        )


def run_episode(policy: RepositionPolicy, config: SimConfig, orders: Sequence[TripOrder],
                grid: HexGrid, travel: TravelTimeModel,
                driver_weights: np.ndarray | None = None) -> EpisodeResult:
    """Simulate one episode; identical inputs give identical results."""
    return Simulator(grid, travel, config, policy, orders, driver_weights).run()
