import math

import numpy as np
import pytest

from repositioning.baselines import (GreedyPolicy, MABPolicy, MabState, RandomPolicy, greedy_choice, random_choice,
                                     record_return, ucb1_select)
from repositioning.hexgrid import HexGrid, TravelTimeModel
from repositioning.simcore import DriverState, run_episode
from repositioning.simcore.policy import ReviewRequest
from repositioning.valuenet import TabularDualValue, ValueConfig
from oracles import axial_neighbours, cost_integral


@pytest.fixture
def grid():
    return HexGrid.hexagon(2, 500.0, origin=(30.0, 120.0), invalid=[(1, 0)])


class View:
    def __init__(self, grid):
        self.grid = grid
        self.travel = TravelTimeModel(grid)


def request(grid, cell, t=0.0):
    return ReviewRequest(0, DriverState(grid.representative_point(cell), cell, t), 6.0)


class TestRandom:
    def test_uniform_over_valid_options(self, grid):
        c = grid.id_of((0, 0))
        allowed = [c] + axial_neighbours(grid)[c]
        rng = np.random.default_rng(0)
        draws = np.array([random_choice(grid, c, rng) for _ in range(21000)])
        assert set(draws.tolist()) == set(allowed)
        for a in allowed:
            assert abs(np.mean(draws == a) - 1 / len(allowed)) < 0.01

    def test_invalid_cell_escapes(self):
        ring = [(1, 0), (1, -1), (0, -1), (-1, 0), (-1, 1), (0, 1)]
        g = HexGrid.hexagon(2, 500.0, invalid=ring + [(0, 0)])
        dest = random_choice(g, g.id_of((0, 0)), np.random.default_rng(0))
        assert g.cells[dest].valid


class TestGreedy:
    def _model(self, grid, values):
        m = TabularDualValue(len(grid), ValueConfig(gamma=0.92))
        m.V[:] = values
        return m

    def test_moves_to_best_discounted_neighbour(self, grid):
        c = grid.id_of((0, 0))
        vals = np.zeros(len(grid))
        target = axial_neighbours(grid)[c][2]
        vals[target] = 50.0
        pol = GreedyPolicy(self._model(grid, vals))
        assert pol.decide(request(grid, c), View(grid), None) == target

    def test_matches_direct_enumeration(self, grid):
        rng = np.random.default_rng(1)
        travel = TravelTimeModel(grid, 300.0)
        for _ in range(30):
            vals = rng.normal(10, 3, len(grid))
            m = self._model(grid, vals)
            c = int(rng.choice(grid.valid_ids))
            L, cost = float(rng.uniform(1, 8)), float(rng.uniform(0, 1))
            xy = grid.representative_xy[c]
            best, best_val = None, -math.inf
            for d in sorted([c] + axial_neighbours(grid)[c]):
                dt = L if d == c else math.dist(xy, grid.representative_xy[d]) / 300.0
                val = (0.0 if d == c else cost_integral(cost, 0.0, dt, 0.92)) + 0.92 ** dt * vals[d]
                if val > best_val:
                    best, best_val = d, val
            assert greedy_choice(grid, travel, m, c, xy, 0.0, L, cost, 0.92) == best


class TestUCB1:
    def test_untried_first_in_order(self):
        st_ = MabState()
        st_.counts[:] = [1, 0, 3, 0, 1, 1, 1]
        assert ucb1_select(st_) == 1
        assert ucb1_select(st_, mask=np.array([1, 0, 1, 1, 1, 1, 1], bool)) == 3

    def test_index_formula(self):
        st_ = MabState(np.array([2, 8, 1, 1, 1, 1, 1]), np.array([1.0, 1.2, 0, 0, 0, 0, 0]))
        N = 15
        idx = st_.means + np.sqrt(2 * np.log(N) / st_.counts)
        assert ucb1_select(st_) == int(np.argmax(idx))

    def test_running_mean(self):
        st_ = MabState()
        for r in (1.0, 2.0, 6.0):
            record_return(st_, 4, r)
        assert st_.counts[4] == 3 and st_.means[4] == pytest.approx(3.0)

    def test_no_arm(self):
        with pytest.raises(ValueError):
            ucb1_select(MabState(), mask=np.zeros(7, bool))

    def test_finds_best_arm(self):
        rng = np.random.default_rng(0)
        mu = np.array([0.1, 0.5, 0.2, 0.9, 0.3, 0.4, 0.0])
        st_ = MabState()
        for _ in range(3000):
            a = ucb1_select(st_)
            record_return(st_, a, float(rng.random() < mu[a]))
        assert int(np.argmax(st_.counts)) == 3
        assert st_.counts[3] > 0.7 * st_.total


class TestMABPolicy:
    def test_state_round_trip(self):
        pol = MABPolicy()
        pol.observe(0, 5, 2, 3.5)
        pol.observe(0, 5, 2, 1.5)
        back = MABPolicy.from_dict(pol.to_dict())
        assert back.states[5].counts[2] == 2 and back.states[5].means[2] == 2.5

    @pytest.mark.parametrize("bad", [{"1": {"counts": [1, 2], "means": [0.0, 0.0]}},
                                     {"1": {"counts": [-1] + [0] * 6, "means": [0.0] * 7}}])
    def test_bad_state(self, bad):
        with pytest.raises(ValueError):
            MABPolicy.from_dict(bad)

    def test_frozen_copy_is_independent(self):
        pol = MABPolicy()
        pol.observe(0, 1, 0, 1.0)
        cp = pol.frozen_copy()
        cp.observe(0, 1, 0, 5.0)
        assert pol.states[1].counts[0] == 1

    def test_learns_inside_episode(self, small_city):
        city = small_city
        pol = MABPolicy()
        run_episode(pol, city.sim_config(0), city.orders(0), city.grid, city.travel, city.driver_weights)
        assert sum(s.total for s in pol.states.values()) > 0

    def test_explore_is_uniform_over_valid(self, grid):
        pol = MABPolicy(explore=True)
        c = grid.id_of((0, 0))
        rng = np.random.default_rng(0)
        picks = {pol.decide(request(grid, c), View(grid), rng) for _ in range(300)}
        assert picks == set([c] + axial_neighbours(grid)[c])


def test_random_policy_in_episode(small_city):
    city = small_city
    res = run_episode(RandomPolicy(), city.sim_config(1), city.orders(1), city.grid, city.travel,
                      city.driver_weights)
    assert res.n_reviews > 0
