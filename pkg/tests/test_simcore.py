import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from repositioning.baselines import RandomPolicy
from repositioning.hexgrid import HexGrid, TravelTimeModel
from repositioning.simcore import (CancellationModel, ChurnModel, CruisingModel, DataError, DemandModel,
                                   DriverState, OptionRecord, PolicyError, RepositionPolicy, SDContext,
                                   SimConfig, StayPolicy, TransitionRecord, TripOrder, episode_streams,
                                   load_trips_csv, match_batch, run_episode, save_trips_csv, solve_assignment)
from oracles import brute_force_assignment, replay_metrics


@pytest.fixture
def grid():
    return HexGrid.hexagon(2, 500.0, origin=(30.0, 120.0))


@pytest.fixture
def travel(grid):
    return TravelTimeModel(grid, 400.0)


def one_driver_at(grid, cell):
    w = np.zeros(len(grid))
    w[cell] = 1.0
    return w


class TestEntities:
    def test_option_reward_sign(self):
        assert OptionRecord("dispatch", 1, 10.0, price=7.5).reward == 7.5
        assert OptionRecord("reposition", 3, 4.0, cost=2.0).reward == -2.0

    @pytest.mark.parametrize("kw", [
        dict(kind="dispatch", price=None), dict(kind="dispatch", price=-1.0),
        dict(kind="dispatch", price=1.0, cost=0.0), dict(kind="reposition", cost=None),
        dict(kind="reposition", cost=-1.0), dict(kind="teleport", cost=0.0),
    ])
    def test_option_validation(self, kw):
        kind = kw.pop("kind")
        with pytest.raises(ValueError):
            OptionRecord(kind, 0, 1.0, **kw)

    def test_trip_order_validation(self):
        with pytest.raises(ValueError):
            TripOrder(0, 0.0, (0, 0), (0, 0), price=0.0, trip_duration=1.0)
        with pytest.raises(ValueError):
            TripOrder(0, 0.0, (0, 0), (0, 0), price=1.0, trip_duration=0.0)

    def test_transition_needs_one_step(self):
        s = DriverState((0.0, 0.0), 0, 0.0)
        with pytest.raises(ValueError):
            TransitionRecord(s, OptionRecord("reposition", 0, 0.0, cost=0.0), 0.0, 0, s)

    def test_sd_context_gaps(self):
        ctx = SDContext(((2, 5, 4),) + ((0, 0, 0),) * 6)
        assert ctx.gaps()[0] == 2
        with pytest.raises(ValueError):
            SDContext(((1, 1, 1),))


class TestSimConfig:
    def test_idle_threshold_covers_review_interval(self):
        with pytest.raises(ValueError):
            SimConfig(idle_threshold_min=1.0, review_interval_s=100.0)

    @pytest.mark.parametrize("field", ["matching_window_s", "review_interval_s", "horizon_s"])
    def test_positive_intervals(self, field):
        with pytest.raises(ValueError):
            SimConfig(**{field: 0.0})

    def test_round_trip(self):
        cfg = SimConfig(seed=4, n_drivers=7, n_managed=3, cancellation=CancellationModel(1500.0, 0.01))
        back = SimConfig.from_dict(cfg.to_dict())
        assert back.to_dict() == cfg.to_dict()

    def test_unknown_key(self):
        with pytest.raises(ValueError):
            SimConfig.from_dict({"speed": 3})


class TestCancellation:
    def test_zero_distance_with_zero_floor_never_cancels(self):
        m = CancellationModel(grace_m=0.0)
        rng = np.random.default_rng(0)
        assert not any(m.maybe_cancel(0.0, rng) for _ in range(1000))

    def test_far_pickups_always_cancel(self):
        m = CancellationModel()
        rng = np.random.default_rng(0)
        assert all(m.maybe_cancel(1e7, rng) for _ in range(1000))

    def test_midpoint_rate(self):
        m = CancellationModel(2000.0, 1 / 500)
        rng = np.random.default_rng(1)
        rate = np.mean([m.maybe_cancel(2000.0, rng) for _ in range(100_000)])
        assert abs(rate - 0.5) < 0.01

    @given(st.floats(0, 1e5), st.floats(0, 1e5))
    def test_monotone(self, a, b):
        m = CancellationModel(1000.0, 1 / 300, floor=0.05, ceiling=0.9)
        lo, hi = sorted((a, b))
        assert 0.05 <= m.probability(lo) <= m.probability(hi) <= 0.9

    def test_negative_distance(self):
        with pytest.raises(ValueError):
            CancellationModel().probability(-1.0)


class TestCruising:
    def test_point_mass_on_self(self):
        m = CruisingModel.from_entries([(h, 4, 4, 1.0) for h in range(24)])
        rng = np.random.default_rng(0)
        assert {m.next_cell(4, 13, rng) for _ in range(100)} == {4}

    def test_uniform_row_frequencies(self):
        m = CruisingModel.from_entries([(9, 0, d, 1 / 7) for d in range(7)])
        rng = np.random.default_rng(2)
        draws = np.array([m.next_cell(0, 9, rng) for _ in range(100_000)])
        freq = np.bincount(draws, minlength=7) / len(draws)
        assert np.all(np.abs(freq - 1 / 7) < 0.01)

    def test_missing_row_stays(self):
        assert CruisingModel().next_cell(11, 3, np.random.default_rng(0)) == 11

    def test_row_must_sum_to_one(self):
        with pytest.raises(DataError):
            CruisingModel.from_entries([(0, 0, 1, 0.5), (0, 0, 2, 0.3)])

    def test_csv_round_trip(self, tmp_path):
        m = CruisingModel.from_entries([(0, 0, 0, 0.25), (0, 0, 1, 0.75), (5, 2, 2, 1.0)])
        m.save_csv(tmp_path / "c.csv")
        assert list(CruisingModel.load_csv(tmp_path / "c.csv").entries()) == list(m.entries())

    def test_csv_error_names_line(self, tmp_path):
        (tmp_path / "c.csv").write_text("hour,origin_cell,dest_cell,prob\n0,0,0,1.0\n0,1,x,1.0\n")
        with pytest.raises(DataError, match=":3:"):
            CruisingModel.load_csv(tmp_path / "c.csv")


class TestChurn:
    def test_zero_rates(self):
        going, arrivals = ChurnModel(np.zeros((24, 5)), 0.0).step(3, 300.0, [1, 2, 3], np.random.default_rng(0))
        assert going == [] and arrivals.sum() == 0

    def test_arrival_rate(self):
        rates = np.zeros((24, 1))
        rates[:, 0] = 3.0
        m = ChurnModel(rates)
        rng = np.random.default_rng(5)
        total = sum(int(m.step(h % 24, 3600.0, [], rng)[1].sum()) for h in range(10_000))
        assert abs(total / 10_000 - 3.0) < 0.05

    def test_managed_drivers_never_churn(self, grid, travel):
        cfg = SimConfig(n_drivers=6, n_managed=3, horizon_s=3 * 3600.0, seed=1,
                        churn=ChurnModel(offline_hazard_per_hour=1.0))
        res = run_episode(StayPolicy(), cfg, [], grid, travel)
        offline = {e.driver_id for e in res.events if e.kind == "offline"}
        assert offline and offline.isdisjoint({0, 1, 2})
        for d in res.metrics.group(True):
            assert d.online_hours == pytest.approx(3.0)


class TestMatching:
    def test_single_pair(self):
        assert match_batch(np.array([[0.0, 0.0]]), np.array([[10.0, 0.0]])) == [(0, 0)]

    def test_two_by_two(self):
        cost = np.array([[1.0, 2.0], [2.0, 1.0]])
        pairs = solve_assignment(cost)
        assert sorted(pairs) == [(0, 0), (1, 1)]
        assert sum(cost[i, j] for i, j in pairs) == 2.0

    def test_empty(self):
        assert match_batch(np.zeros((0, 2)), np.zeros((3, 2))) == []
        assert solve_assignment(np.zeros((0, 0))) == []

    def test_radius_excludes_far_orders(self):
        pairs = match_batch(np.array([[0.0, 0.0]]), np.array([[5000.0, 0.0]]), max_pickup_m=3000.0)
        assert pairs == []

    @given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 2 ** 31 - 1), st.booleans())
    def test_brute_force_agreement(self, n, m, seed, sparse):
        rng = np.random.default_rng(seed)
        cost = rng.uniform(0, 100, size=(n, m))
        feasible = rng.random((n, m)) < 0.6 if sparse else None
        pairs = solve_assignment(cost, feasible)
        k, total, ref = brute_force_assignment(cost, feasible)
        assert sorted(pairs) == ref
        assert len(pairs) == k
        assert sum(cost[i, j] for i, j in pairs) == pytest.approx(total, abs=1e-9)
        assert len({i for i, _ in pairs}) == len(pairs) == len({j for _, j in pairs})


class TestDemand:
    def test_totals_match_rates(self, grid, travel):
        rates = np.full((24, len(grid)), 2.0)
        dm = DemandModel(grid, travel, rates, np.ones(len(grid)))
        orders = dm.sample(200 * 3600.0, 0, np.random.default_rng(0))
        expected = 2.0 * len(grid) * 200
        assert abs(len(orders) / expected - 1) < 0.02

    def test_sorted_and_valid(self, grid, travel):
        dm = DemandModel(grid, travel, np.full((24, len(grid)), 5.0), np.ones(len(grid)))
        orders = dm.sample(3600.0, 8, np.random.default_rng(1))
        times = [o.request_time for o in orders]
        assert times == sorted(times)
        assert all(o.price > 0 and o.trip_duration > 0 for o in orders)
        assert all(grid.locate(*o.origin) >= 0 for o in orders)

    def test_invalid_cells_carry_no_demand(self):
        g = HexGrid.hexagon(2, 500.0, invalid=[(1, 0)])
        rates = np.ones((24, len(g)))
        with pytest.raises(ValueError):
            DemandModel(g, TravelTimeModel(g), rates, np.ones(len(g)))

    def test_trip_csv_round_trip(self, grid, travel, tmp_path):
        dm = DemandModel(grid, travel, np.full((24, len(grid)), 3.0), np.ones(len(grid)))
        orders = dm.sample(1800.0, 0, np.random.default_rng(2))
        save_trips_csv(orders, tmp_path / "t.csv")
        assert load_trips_csv(tmp_path / "t.csv") == orders

    def test_trip_csv_error_names_line(self, tmp_path):
        (tmp_path / "t.csv").write_text(
            "order_id,request_ts,origin_lat,origin_lon,dest_lat,dest_lon,price,duration_min\n"
            "0,10,30,120,30.01,120.01,5,4\n1,20,30,120,30.01,120.01,-5,4\n")
        with pytest.raises(DataError, match=":3:"):
            load_trips_csv(tmp_path / "t.csv")

    def test_iso_timestamps(self, tmp_path):
        (tmp_path / "t.csv").write_text(
            "order_id,request_ts,origin_lat,origin_lon,dest_lat,dest_lon,price,duration_min\n"
            "0,2024-05-01T17:30:00,30,120,30.01,120.01,5,4\n")
        (o,) = load_trips_csv(tmp_path / "t.csv", start_hour=16)
        assert o.request_time == 5400.0


class TestEpisode:
    def test_no_orders_stay_policy(self, grid, travel):
        cfg = SimConfig(n_drivers=3, n_managed=3, horizon_s=3600.0, reposition_cost_per_min=0.5)
        res = run_episode(StayPolicy(), cfg, [], grid, travel)
        for d in res.metrics.drivers:
            assert d.income == 0.0
            assert d.online_hours == pytest.approx(1.0)
        assert res.transitions and all(t.option.kind == "reposition" for t in res.transitions)
        assert all(t.reward == -t.option.cost for t in res.transitions)

    def test_single_adjacent_order(self, grid, travel):
        c = grid.id_of((0, 0))
        nb = grid.neighbors(c)[0]
        order = TripOrder(0, 0.0, grid.cell(nb).center, grid.cell(c).center, price=9.0, trip_duration=4.0)
        cfg = SimConfig(n_drivers=1, n_managed=1, horizon_s=1800.0,
                        cancellation=CancellationModel(floor=0.0, ceiling=0.0))
        res = run_episode(StayPolicy(), cfg, [order], grid, travel, one_driver_at(grid, c))
        (dispatch,) = [e for e in res.events if e.kind == "dispatch"]
        assert dispatch.time == 0.0
        assert res.metrics.drivers[0].income == 9.0
        assert res.order_status == {0: "completed"}

    def test_dispatch_in_origin_cell_drops_reposition(self, grid, travel):
        c = grid.id_of((0, 0))
        # order appears right after the first review sends the driver away from c
        order = TripOrder(0, 1.0, grid.cell(c).center, grid.cell(grid.neighbors(c)[0]).center, 5.0, 3.0)

        class Away(RepositionPolicy):
            def decide(self, request, view, rng):
                return view.grid.neighbors(request.state.cell)[-1]

        cfg = SimConfig(n_drivers=1, n_managed=1, horizon_s=1800.0, reposition_cost_per_min=1.0,
                        cancellation=CancellationModel(floor=0.0, ceiling=0.0))
        res = run_episode(Away(), cfg, [order], grid, travel, one_driver_at(grid, c))
        first = [t for t in res.transitions if t.s.time == 0.0]
        assert first == [], "a reposition interrupted inside its origin cell is not logged"
        assert res.metrics.drivers[0].income == 5.0

    def test_policy_failure_aborts(self, grid, travel):
        class Broken(RepositionPolicy):
            def decide(self, request, view, rng):
                raise RuntimeError("boom")

        with pytest.raises(PolicyError, match="boom"):
            run_episode(Broken(), SimConfig(n_drivers=2, n_managed=1, horizon_s=1200.0), [], grid, travel)

    def test_invalid_destination_rejected(self, travel):
        g = HexGrid.hexagon(2, 500.0, invalid=[(1, 0)])

        class ToLake(RepositionPolicy):
            def decide(self, request, view, rng):
                return g.id_of((1, 0))

        with pytest.raises(PolicyError):
            run_episode(ToLake(), SimConfig(n_drivers=2, n_managed=2, horizon_s=1200.0), [], g,
                        TravelTimeModel(g))


@pytest.fixture(scope="module")
def busy_episode(small_city_module):
    city = small_city_module
    cfg = city.sim_config(11)
    return city, run_episode(RandomPolicy(), cfg, city.orders(11), city.grid, city.travel, city.driver_weights)


@pytest.fixture(scope="module")
def small_city_module():
    from repositioning.simcore.scenario import reference_city

    return reference_city(5, radius=3, n_drivers=15, n_managed=5, horizon_h=2.0, n_hotspots=2,
                          churn_arrivals_per_hour=4.0, churn_offline_hazard_per_hour=0.3)


class TestEpisodeInvariants:
    def test_every_order_has_one_fate(self, busy_episode):
        city, res = busy_episode
        orders = city.orders(11)
        assert set(res.order_status) == {o.id for o in orders}
        m = res.metrics
        assert m.orders_completed + m.orders_cancelled + m.orders_expired == len(orders)

    def test_driver_seconds_partition_the_horizon(self, busy_episode):
        city, res = busy_episode
        H = city.config.horizon_h * 3600.0
        went_offline = {e.driver_id: e.time for e in res.events if e.kind == "offline"}
        per_driver = {}
        for d, _status, t0, t1 in res.status_log:
            per_driver.setdefault(d, []).append((t0, t1))
        for d, spans in per_driver.items():
            spans.sort()
            for (a0, a1), (b0, _b1) in zip(spans, spans[1:]):
                assert a1 == pytest.approx(b0)
            assert spans[-1][1] == pytest.approx(went_offline.get(d, H))

    def test_metrics_replay_from_logs(self, busy_episode):
        city, res = busy_episode
        income, online, service = replay_metrics(res.status_log, res.trips, city.config.horizon_h * 3600.0)
        for d in res.metrics.drivers:
            assert d.income == pytest.approx(income.get(d.driver_id, 0.0))
            assert d.online_hours == pytest.approx(online.get(d.driver_id, 0.0))
            assert d.service_hours == pytest.approx(service.get(d.driver_id, 0.0))

    def test_income_is_sum_of_completed_prices(self, busy_episode):
        city, res = busy_episode
        prices = {o.id: o.price for o in city.orders(11)}
        completed = sum(prices[i] for i, s in res.order_status.items() if s == "completed")
        assert sum(d.income for d in res.metrics.drivers) == pytest.approx(completed)

    def test_service_time_is_sum_of_trip_durations(self, busy_episode):
        _city, res = busy_episode
        assert sum(d.service_hours for d in res.metrics.drivers) == pytest.approx(
            sum(t1 - t0 for _d, t0, t1, _p in res.trips) / 3600.0)

    def test_transition_records(self, busy_episode):
        city, res = busy_episode
        H = city.config.horizon_h * 3600.0
        assert res.transitions
        for t in res.transitions:
            assert t.k >= 1
            assert t.terminal == (t.s_next.time >= H)
            assert t.s.cell == city.grid.locate(*t.s.location)
            if t.option.kind == "dispatch":
                assert t.reward == t.option.price

    def test_churn_happened(self, busy_episode):
        _city, res = busy_episode
        kinds = {e.kind for e in res.events}
        assert {"online", "offline", "dispatch", "idle_start"} <= kinds

    def test_replay_is_bit_identical(self, busy_episode):
        city, res = busy_episode
        again = run_episode(RandomPolicy(), city.sim_config(11), city.orders(11), city.grid, city.travel,
                            city.driver_weights)
        assert again.metrics == res.metrics
        assert again.transitions == res.transitions
        assert again.events == res.events
        assert again.status_log == res.status_log


def test_named_streams_are_independent():
    a, b = episode_streams(3), episode_streams(3)
    assert a.keys() == b.keys()
    assert a["demand"].random() == b["demand"].random()
    assert episode_streams(3)["demand"].random() != episode_streams(3)["cancel"].random()
