"""Value-based policy search: decision-time planning over reposition paths.

Phase 1 enumerates every path of ``depth`` legs from the driver's cell, each
leg being "stay" or a move to a valid neighbour.  Phase 2 evaluates all path
nodes in one batch and backs values up from the leaf:

    W_d = r_d + V(s_d),    W_j = r_j + p_d(s_j) Vc(s_j) + (1 - p_d(s_j)) W_{j+1}

where ``V`` and ``Vc`` (the dispatch-conditional value) are discounted to the
node's cumulative ETA and leg costs are time-discounted.  The first step of
the best path is executed.  Long-idle drivers instead jump to a globally
high-value pick-up point from a precomputed table.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .hexgrid import HexGrid, TravelTimeModel
from .nn import softmax
from .simcore.policy import Destination, RepositionPolicy, ReviewRequest


class NoValidCellError(RuntimeError):
    pass


@dataclass
class PlannerConfig:
    depth: int = 2
    gamma: float = 0.92
    idle_threshold_min: float = 5.0  # L: duration of a stay leg
    cost_per_min: float = 0.0
    long_search_trigger_min: float = 100.0
    long_search_top: int = 200
    long_search_bin_min: float = 20.0
    long_search_lambda: float = 0.92
    temperature: float = 1.0

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError("expansion depth must be at least 1")
        if not 0 < self.gamma < 1:
            raise ValueError("gamma must lie in (0, 1)")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")


@dataclass
class PathCandidate:
    cells: tuple[int, ...]  # (c0, c1, ..., cd)
    costs: tuple[float, ...]  # discounted leg rewards, <= 0, 0 for stays
    etas: tuple[float, ...]  # cumulative minutes from the decision time to each node
    value: float = math.nan

    @property
    def first_step(self) -> int:
        return self.cells[1]

    def __len__(self) -> int:
        return len(self.cells) - 1


def leg_cost(cost_per_min: float, start_min: float, duration_min: float, gamma: float) -> float:
    """Reward of a leg (``<= 0``) discounted to the decision time.

    A cost rate ``c`` paid over ``dt`` minutes starting ``t`` minutes ahead is
    ``-gamma^t * c dt * (gamma^dt - 1) / (dt (gamma - 1))``.
    """
    if duration_min <= 0 or cost_per_min == 0:
        return 0.0
    r = -cost_per_min * duration_min
    return float(gamma ** start_min * r * (gamma ** duration_min - 1.0) / (duration_min * (gamma - 1.0)))


@dataclass
class Expansion:
    """Path tree of one root in array form; node 0 is the root."""

    cell: np.ndarray
    xy: np.ndarray
    t_min: np.ndarray
    cost: np.ndarray
    parent: np.ndarray
    paths: np.ndarray  # (n_paths, path_len) node ids, root excluded
    fallback: bool


def expand(grid: HexGrid, travel: TravelTimeModel, cfg: PlannerConfig, root_cell: int,
           root_xy, depth: int | None = None) -> Expansion:
    depth = cfg.depth if depth is None else depth
    root_valid = bool(grid.valid_mask[root_cell])
    first = grid.neighbors(root_cell)
    fallback = not first
    if fallback:
        _ring, far = grid.nearest_valid(root_cell)
        if not far and not root_valid:
            raise NoValidCellError("no valid cell anywhere in the grid")
        first = far
    if root_valid:
        first = [root_cell] + first
    cell = [root_cell]
    xy = [tuple(root_xy)]
    t = [0.0]
    cost = [0.0]
    parent = [-1]
    L = cfg.idle_threshold_min

    def add(p: int, c: int) -> int:
        if c == cell[p]:
            nxy, dt, r = xy[p], L, 0.0
        else:
            nxy = tuple(grid.representative_xy[c])
            dt = float(travel.eta_xy(xy[p], nxy))
            r = leg_cost(cfg.cost_per_min, t[p], dt, cfg.gamma)
        cell.append(c)
        xy.append(nxy)
        t.append(t[p] + dt)
        cost.append(r)
        parent.append(p)
        return len(cell) - 1

    level = [add(0, c) for c in first]
    paths = [[n] for n in level]
    if not fallback:
        for _ in range(depth - 1):
            new_paths = []
            for path in paths:
                p = path[-1]
                for c in [cell[p]] + grid.neighbors(cell[p]):
                    new_paths.append(path + [add(p, c)])
            paths = new_paths
    return Expansion(np.array(cell), np.array(xy, dtype=float), np.array(t), np.array(cost),
                     np.array(parent), np.array(paths, dtype=np.int64), fallback)


def generate_paths(grid: HexGrid, travel: TravelTimeModel, cfg: PlannerConfig, root_cell: int,
                   root_xy=None, depth: int | None = None) -> list[PathCandidate]:
    """All reposition paths from ``root_cell`` (values unset)."""
    if root_xy is None:
        root_xy = grid.representative_xy[root_cell]
    ex = expand(grid, travel, cfg, root_cell, root_xy, depth)
    out = []
    for row in ex.paths.tolist():
        out.append(PathCandidate(
            cells=(root_cell, *(int(ex.cell[n]) for n in row)),
            costs=tuple(float(ex.cost[n]) for n in row),
            etas=tuple(float(ex.t_min[n]) for n in row),
        ))
    return out


def backup(paths: np.ndarray, cost: np.ndarray, v: np.ndarray, vc: np.ndarray, pd: np.ndarray) -> np.ndarray:
    """Path values from per-node leg rewards, discounted values and dispatch probabilities."""
    w = cost[paths[:, -1]] + v[paths[:, -1]]
    for j in range(paths.shape[1] - 2, -1, -1):
        n = paths[:, j]
        w = cost[n] + pd[n] * vc[n] + (1.0 - pd[n]) * w
    return w


def path_value(path: PathCandidate, v_fn, vc_fn, pd_fn) -> float:
    """Value of a single path given callables of ``(cell, eta_min)``.

    ``v_fn`` and ``vc_fn`` return values already discounted to ``eta_min``.
    """
    cells, costs, etas = path.cells[1:], path.costs, path.etas
    w = costs[-1] + v_fn(cells[-1], etas[-1])
    for j in range(len(cells) - 2, -1, -1):
        p = pd_fn(cells[j], etas[j])
        w = costs[j] + p * vc_fn(cells[j], etas[j]) + (1.0 - p) * w
    return float(w)


def first_step_values(first: np.ndarray, values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Best path value per distinct first-step cell, cells in ascending id order."""
    cells = np.unique(first)
    q = np.array([values[first == c].max() for c in cells])
    return cells, q


def argmax_lowest(cells: np.ndarray, q: np.ndarray) -> int:
    best = q.max()
    return int(cells[q == best].min())


class PlanningModels:
    """Frozen value model plus dispatch-probability model consumed by the planner."""

    def __init__(self, value_model, dispatch_model, day_of_week: int = 0):
        self.value_model = value_model
        self.dispatch_model = dispatch_model
        self.day_of_week = day_of_week

    def evaluate_nodes(self, xy: np.ndarray, t0_s: np.ndarray, t_min: np.ndarray, cells: np.ndarray):
        """Discounted V, discounted Vc and p_d at each node, in one batch per model."""
        vm = self.value_model
        v = vm.discounted("v", xy, t0_s, cells, t_min)
        vc = vm.discounted("vb", xy, t0_s, cells, t_min)
        pd = np.asarray(self.dispatch_model.predict(cells, t0_s + t_min * 60.0, self.day_of_week), dtype=float)
        return v, vc, pd


def plan(requests: Sequence[tuple[int, tuple[float, float], float]], grid: HexGrid, travel: TravelTimeModel,
         cfg: PlannerConfig, models: PlanningModels, depth: int | None = None):
    """Plan for many roots at once.

    ``requests`` holds ``(cell, xy, time_s)``.  Returns per root the expansion
    and its path values; all network queries go out as one batch.
    """
    expansions = [expand(grid, travel, cfg, c, xy, depth) for c, xy, _t in requests]
    offs = np.cumsum([0] + [len(e.cell) for e in expansions])
    xy = np.concatenate([e.xy for e in expansions])
    t_min = np.concatenate([e.t_min for e in expansions])
    cells = np.concatenate([e.cell for e in expansions])
    t0 = np.concatenate([np.full(len(e.cell), float(r[2])) for e, r in zip(expansions, requests)])
    v, vc, pd = models.evaluate_nodes(xy, t0, t_min, cells)
    out = []
    for i, e in enumerate(expansions):
        sl = slice(offs[i], offs[i + 1])
        out.append((e, backup(e.paths, e.cost, v[sl], vc[sl], pd[sl])))
    return out


def select_action(cell: int, xy, time_s: float, grid: HexGrid, travel: TravelTimeModel, cfg: PlannerConfig,
                  models: PlanningModels, depth: int | None = None) -> int:
    """First step of the maximum-value path; ties go to the lowest cell id."""
    (e, values), = plan([(cell, xy, time_s)], grid, travel, cfg, models, depth)
    cells, q = first_step_values(e.cell[e.paths[:, 0]], values)
    return argmax_lowest(cells, q)


def boltzmann_choice(cells: np.ndarray, q: np.ndarray, rng: np.random.Generator, temperature: float = 1.0):
    probs = softmax(np.asarray(q, dtype=float) / temperature)
    return int(cells[rng.choice(len(cells), p=probs)]), probs


def select_action_stochastic(cell: int, xy, time_s: float, grid: HexGrid, travel: TravelTimeModel,
                             cfg: PlannerConfig, models: PlanningModels, rng: np.random.Generator,
                             depth: int | None = None) -> int:
    """Sample the first step from a Boltzmann distribution over first-step values."""
    (e, values), = plan([(cell, xy, time_s)], grid, travel, cfg, models, depth)
    cells, q = first_step_values(e.cell[e.paths[:, 0]], values)
    return boltzmann_choice(cells, q, rng, cfg.temperature)[0]


# -- long search ----------------------------------------------------------------

@dataclass
class LongSearchTable:
    bin_s: float
    # interval index -> ranked [(cell, (lat, lon), value)]
    entries: dict[int, list[tuple[int, tuple[float, float], float]]] = field(default_factory=dict)

    def interval(self, time_s: float) -> int:
        return int(time_s // self.bin_s)

    def to_dict(self) -> dict:
        return {"bin_s": self.bin_s,
                "intervals": {str(k): [[c, list(p), v] for c, p, v in rows] for k, rows in sorted(self.entries.items())}}

    @classmethod
    def from_dict(cls, d: dict) -> "LongSearchTable":
        return cls(float(d["bin_s"]), {int(k): [(int(c), (float(p[0]), float(p[1])), float(v)) for c, p, v in rows]
                                       for k, rows in d["intervals"].items()})

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path: str | Path) -> "LongSearchTable":
        return cls.from_dict(json.loads(Path(path).read_text()))


def build_long_search_table(value_model, grid: HexGrid, horizon_s: float, top: int = 200,
                            bin_min: float = 20.0, samples_per_bin: int = 4) -> LongSearchTable:
    """Per interval, average V at each valid cell's representative point and keep the best ``top``."""
    bin_s = bin_min * 60.0
    valid = np.array(grid.valid_ids, dtype=np.int64)
    pts = grid.representative_xy[valid]
    table = LongSearchTable(bin_s)
    n_bins = int(math.ceil(horizon_s / bin_s))
    for b in range(n_bins):
        times = b * bin_s + (np.arange(samples_per_bin) + 0.5) * bin_s / samples_per_bin
        times = times[times < horizon_s]
        vals = np.zeros(len(valid))
        for t in times:
            vals += value_model.evaluate("v", pts, np.full(len(valid), t), valid)
        vals /= max(1, len(times))
        order = np.lexsort((valid, -vals))[:top]
        table.entries[b] = [(int(valid[i]), grid.to_latlon(*pts[i]), float(vals[i])) for i in order]
    return table


def long_search(xy, time_s: float, table: LongSearchTable, travel: TravelTimeModel, grid: HexGrid,
                lam: float = 0.92) -> Optional[Destination]:
    """Table entry maximising ``lam**(tau/10) * V`` for the current interval, or None if empty."""
    rows = table.entries.get(table.interval(time_s), [])
    if not rows:
        return None
    pts = np.array([grid.to_xy(*p) for _c, p, _v in rows])
    tau = np.asarray(travel.eta_xy(np.asarray(xy, dtype=float)[None, :], pts), dtype=float).reshape(-1)
    score = lam ** (tau / 10.0) * np.array([v for _c, _p, v in rows])
    i = int(np.flatnonzero(score == score.max())[0])
    return Destination(rows[i][0], rows[i][1])


# -- policy ---------------------------------------------------------------------

class VPSPolicy(RepositionPolicy):
    def __init__(self, models: PlanningModels, config: PlannerConfig | None = None, stochastic: bool = False,
                 long_search_table: LongSearchTable | None = None):
        self.models = models
        self.config = config or PlannerConfig()
        self.stochastic = stochastic
        self.table = long_search_table
        self.name = f"vps{self.config.depth}" + ("-stoch" if stochastic else "")

    def decide_batch(self, requests: Sequence[ReviewRequest], view, rng):
        grid, travel, cfg = view.grid, view.travel, self.config
        out: list = [None] * len(requests)
        todo = []
        for i, req in enumerate(requests):
            xy = grid.to_xy(*req.state.location)
            if self.table is not None and req.idle_minutes > cfg.long_search_trigger_min:
                dest = long_search(xy, req.state.time, self.table, travel, grid, cfg.long_search_lambda)
                if dest is not None:
                    out[i] = dest
                    continue
            todo.append((i, (req.state.cell, xy, req.state.time)))
        if todo:
            results = plan([r for _i, r in todo], grid, travel, cfg, self.models)
            for (i, _r), (e, values) in zip(todo, results):
                cells, q = first_step_values(e.cell[e.paths[:, 0]], values)
                if self.stochastic:
                    out[i] = boltzmann_choice(cells, q, rng, cfg.temperature)[0]
                else:
                    out[i] = argmax_lowest(cells, q)
        return out

    def decide(self, request, view, rng):
        return self.decide_batch([request], view, rng)[0]
