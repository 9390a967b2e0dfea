import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from repositioning.evalmetrics import (BootstrapReport, DriverRecord, EpisodeMetrics, UndefinedMetricError,
                                       bootstrap_compare, clip_to_window, iph_group, iph_individual, utilization)
from instances import null_bootstrap_trials

driver = st.builds(
    lambda i, c, h, s: DriverRecord(i, c, h, h * s),
    st.integers(0, 1000), st.floats(0, 500), st.floats(0.1, 12), st.floats(0, 1),
)


class TestIPH:
    def test_individual(self):
        assert iph_individual(DriverRecord(0, 100.0, 4.0, 1.0)) == 25.0
        assert iph_individual(DriverRecord(0, 0.0, 4.0, 0.0)) == 0.0
        with pytest.raises(UndefinedMetricError):
            iph_individual(DriverRecord(0, 0.0, 0.0, 0.0))

    def test_ratio_of_sums(self):
        grp = [DriverRecord(0, 100.0, 4.0, 0.0), DriverRecord(1, 50.0, 1.0, 0.0)]
        assert iph_group(grp) == 30.0

    def test_equal_hours_is_mean(self):
        grp = [DriverRecord(i, c, 3.0, 0.0) for i, c in enumerate([30.0, 60.0, 90.0])]
        assert iph_group(grp) == pytest.approx(np.mean([iph_individual(x) for x in grp]))

    @given(st.lists(driver, min_size=1, max_size=20), st.randoms())
    def test_order_invariant(self, grp, rnd):
        shuffled = list(grp)
        rnd.shuffle(shuffled)
        assert iph_group(shuffled) == pytest.approx(iph_group(grp))
        assert 0.0 <= utilization(grp) <= 1.0 + 1e-12

    def test_empty_group(self):
        with pytest.raises(UndefinedMetricError):
            iph_group([])

    @pytest.mark.parametrize("kw", [dict(income=-1.0), dict(service_hours=5.0)])
    def test_record_validation(self, kw):
        base = dict(driver_id=0, income=1.0, online_hours=4.0, service_hours=1.0)
        base.update(kw)
        with pytest.raises(ValueError):
            DriverRecord(**base)

    def test_utilization_limits(self):
        assert utilization([DriverRecord(0, 1.0, 2.0, 2.0)]) == 1.0
        assert utilization([DriverRecord(0, 0.0, 2.0, 0.0)]) == 0.0


class TestEpisodeMetrics:
    def test_groups_and_round_trip(self):
        m = EpisodeMetrics([DriverRecord(0, 10.0, 1.0, 0.5, True), DriverRecord(1, 30.0, 1.0, 0.2, False)], 3, 1, 0)
        assert m.iph(True) == 10.0 and m.iph(False) == 30.0 and m.iph(None) == 20.0
        d = m.to_dict()
        assert d["iph_all"] == 20.0
        assert EpisodeMetrics.from_dict(d) == m

    def test_replay_matches_engine(self, small_city):
        from repositioning.baselines import RandomPolicy
        from repositioning.simcore import run_episode

        city = small_city
        res = run_episode(RandomPolicy(), city.sim_config(2), city.orders(2), city.grid, city.travel,
                          city.driver_weights)
        H = city.config.horizon_h * 3600.0
        managed = {d.driver_id: d.managed for d in res.metrics.drivers}
        clipped = {d.driver_id: d for d in clip_to_window(res.trips, res.status_log, 0.0, H + 1.0, managed)}
        for d in res.metrics.drivers:
            if d.online_hours == 0:
                continue
            c = clipped[d.driver_id]
            assert c.income == pytest.approx(d.income)
            assert c.online_hours == pytest.approx(d.online_hours)
            assert c.service_hours == pytest.approx(d.service_hours)


class TestWindow:
    def test_clipping(self):
        status = [(0, "idle", 0.0, 3600.0), (0, "serving", 3600.0, 5400.0), (0, "offline", 5400.0, 9000.0)]
        trips = [(0, 3600.0, 5400.0, 12.0)]
        (r,) = clip_to_window(trips, status, 1800.0, 4500.0)
        assert r.online_hours == pytest.approx(0.75)
        assert r.service_hours == pytest.approx(0.25)
        assert r.income == 0.0  # trip completes after the window
        (r,) = clip_to_window(trips, status, 1800.0, 7200.0)
        assert r.income == 12.0 and r.online_hours == pytest.approx(1.0)

    def test_split_trip_records_keep_iph(self):
        status = [(0, "serving", 0.0, 3600.0)]
        whole = clip_to_window([(0, 0.0, 3600.0, 20.0)], status, 0.0, 3601.0)
        split = clip_to_window([(0, 0.0, 1800.0, 8.0), (0, 1800.0, 3600.0, 12.0)], status, 0.0, 3601.0)
        assert iph_group(whole) == iph_group(split)


def pool(n, mu=25.0, sd=5.0, seed=0, offset=0):
    rng = np.random.default_rng(seed)
    return [DriverRecord(offset + i, max(0.0, float(rng.normal(mu, sd))) * 4.0, 4.0, 1.0) for i in range(n)]


class TestBootstrap:
    def test_degenerate_pool(self):
        x = [DriverRecord(i, 100.0, 4.0, 1.0) for i in range(5)]
        rep = bootstrap_compare(x, x * 20, n_resamples=500)
        assert rep.ci_low == rep.ci_high == rep.observed == 25.0
        assert not rep.significant

    def test_shifted_group_is_significant(self):
        n = 40
        x = pool(n, mu=25.0 + 5 * 5.0 / np.sqrt(n), seed=1)
        rep = bootstrap_compare(x, pool(2000, seed=2, offset=100), n_resamples=2000)
        assert rep.significant and rep.observed > rep.ci_high

    def test_deterministic_given_seed(self):
        x, c = pool(10, seed=3), pool(300, seed=4, offset=50)
        assert bootstrap_compare(x, c, 1000, seed=9) == bootstrap_compare(x, c, 1000, seed=9)

    def test_report_json(self):
        rep = bootstrap_compare(pool(5), pool(50, offset=9), n_resamples=200, metric="utilization")
        assert isinstance(rep, BootstrapReport)
        assert '"metric": "utilization"' in rep.to_json()
        assert rep.ci_low <= rep.ci_high

    def test_errors(self):
        x, c = pool(5), pool(50, offset=9)
        for exp, ctrl in (([], c), (x, []), (x, c[:3])):
            with pytest.raises(ValueError):
                bootstrap_compare(exp, ctrl, n_resamples=10)

    def test_unknown_metric(self):
        with pytest.raises(ValueError):
            bootstrap_compare(pool(5), pool(50, offset=9), metric="smiles")

    def test_null_calibration_small(self):
        flags, _ = null_bootstrap_trials(200, 1000, seed=7)
        assert 0.01 <= flags.mean() <= 0.10
