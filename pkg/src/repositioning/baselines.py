"""Reference reposition policies: Random, Greedy and a per-cell UCB1 bandit."""
from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .hexgrid import HexGrid
from .simcore.entities import N_OPTIONS
from .simcore.policy import RepositionPolicy


def _options(grid: HexGrid, cell: int) -> tuple[np.ndarray, np.ndarray]:
    dest = np.array([cell] + [int(n) for n in grid.adjacency[cell]], dtype=np.int64)
    valid = np.array([bool(grid.valid_mask[cell])] + [n >= 0 and bool(grid.valid_mask[n]) for n in dest[1:]])
    return dest, valid


def _nearest_valid(grid: HexGrid, cell: int) -> list[int]:
    _ring, ids = grid.nearest_valid(cell)
    if not ids:
        raise RuntimeError("no valid cell anywhere in the grid")
    return ids


def random_choice(grid: HexGrid, cell: int, rng: np.random.Generator) -> int:
    dest, valid = _options(grid, cell)
    if not valid.any():
        return int(_nearest_valid(grid, cell)[0])
    cand = dest[valid]
    return int(cand[rng.integers(len(cand))])


class RandomPolicy(RepositionPolicy):
    name = "random"

    def decide(self, request, view, rng):
        return random_choice(view.grid, request.state.cell, rng)


def greedy_choice(grid: HexGrid, travel, value_model, cell: int, xy, time_s: float,
                  idle_threshold_min: float, cost_per_min: float, gamma: float) -> int:
    """Best one-leg move by ``leg reward + V discounted to arrival``; stays take L minutes at no cost."""
    cands = [int(c) for c in grid.neighbors(cell)]
    if not cands:
        cands = _nearest_valid(grid, cell)
    if grid.valid_mask[cell]:
        cands = [cell] + cands
    xy = np.asarray(xy, dtype=float)
    pts, eta, reward = [], [], []
    for c in cands:
        if c == cell:
            pts.append(xy)
            eta.append(idle_threshold_min)
            reward.append(0.0)
        else:
            p = grid.representative_xy[c]
            minutes = float(travel.eta_xy(xy, p))
            pts.append(p)
            eta.append(minutes)
            # cost rate integrated with per-minute discounting from the decision time
            reward.append(-cost_per_min * (1.0 - gamma ** minutes) / (1.0 - gamma) if minutes > 0 else 0.0)
    eta = np.array(eta)
    v = value_model.discounted("v", np.array(pts), np.full(len(cands), float(time_s)), np.array(cands), eta)
    total = np.array(reward) + v
    best = total.max()
    return min(c for c, x in zip(cands, total) if x == best)


class GreedyPolicy(RepositionPolicy):
    name = "greedy"

    def __init__(self, value_model, idle_threshold_min: float = 5.0, cost_per_min: float = 0.0, gamma: float = 0.92):
        self.value_model = value_model
        self.L = idle_threshold_min
        self.cost_per_min = cost_per_min
        self.gamma = gamma

    def decide(self, request, view, rng):
        s = request.state
        return greedy_choice(view.grid, view.travel, self.value_model, s.cell, view.grid.to_xy(*s.location),
                             s.time, self.L, self.cost_per_min, self.gamma)


@dataclass
class MabState:
    counts: np.ndarray = field(default_factory=lambda: np.zeros(N_OPTIONS, dtype=np.int64))
    means: np.ndarray = field(default_factory=lambda: np.zeros(N_OPTIONS))

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def ucb1_select(state: MabState, mask: Optional[np.ndarray] = None) -> int:
    """Untried arms first in index order; then the largest ``mean + sqrt(2 ln N / n)``."""
    mask = np.ones(len(state.counts), dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    arms = np.flatnonzero(mask)
    if len(arms) == 0:
        raise ValueError("no selectable arm")
    untried = arms[state.counts[arms] == 0]
    if len(untried):
        return int(untried[0])
    N = state.total
    idx = state.means[arms] + np.sqrt(2.0 * math.log(N) / state.counts[arms])
    return int(arms[np.flatnonzero(idx == idx.max())[0]])


def record_return(state: MabState, arm: int, ret: float) -> None:
    state.counts[arm] += 1
    state.means[arm] += (ret - state.means[arm]) / state.counts[arm]


class MABPolicy(RepositionPolicy):
    """UCB1 per origin cell over the 7 reposition options.

    The arm's return is the discounted net income from the decision until the
    driver's next reposition decision (reported by the simulator through
    ``observe``).  With ``explore=True`` arms are drawn uniformly (pretraining).
    """

    name = "mab"

    def __init__(self, explore: bool = False):
        self.states: dict[int, MabState] = {}
        self.explore = explore

    def state(self, cell: int) -> MabState:
        return self.states.setdefault(cell, MabState())

    def decide(self, request, view, rng):
        grid = view.grid
        cell = request.state.cell
        dest, valid = _options(grid, cell)
        if not valid.any():
            return int(_nearest_valid(grid, cell)[0])
        if self.explore:
            arms = np.flatnonzero(valid)
            return int(dest[arms[rng.integers(len(arms))]])
        return int(dest[ucb1_select(self.state(cell), valid)])

    def observe(self, driver_id, origin_cell, option_index, ret):
        if option_index is not None:
            record_return(self.state(origin_cell), option_index, ret)

    def to_dict(self) -> dict:
        return {str(c): {"counts": st.counts.tolist(), "means": st.means.tolist()} for c, st in sorted(self.states.items())}

    @classmethod
    def from_dict(cls, d: dict) -> "MABPolicy":
        out = cls(explore=False)
        for c, st in d.items():
            counts = np.asarray(st["counts"], dtype=np.int64)
            means = np.asarray(st["means"], dtype=float)
            if counts.shape != (N_OPTIONS,) or means.shape != (N_OPTIONS,) or (counts < 0).any():
                raise ValueError(f"bad bandit state for cell {c}")
            out.states[int(c)] = MabState(counts, means)
        return out

    def frozen_copy(self) -> "MABPolicy":
        """Independent copy for one evaluation episode."""
        out = MABPolicy(explore=False)
        out.states = copy.deepcopy(self.states)
        return out
