import json

import pytest

from repositioning.baselines import RandomPolicy
from repositioning.records import (driver_from_dict, driver_to_dict, event_from_dict, event_to_dict, read_jsonl,
                                   read_many, transition_from_dict, transition_to_dict, write_jsonl)
from repositioning.simcore import DataError, run_episode


@pytest.fixture(scope="module")
def episode(small_city_sd):
    city = small_city_sd
    cfg = city.sim_config(3, record_sd_context=True)
    return run_episode(RandomPolicy(), cfg, city.orders(3), city.grid, city.travel, city.driver_weights)


@pytest.fixture(scope="module")
def small_city_sd():
    from repositioning.simcore.scenario import reference_city

    return reference_city(3, radius=3, n_drivers=10, n_managed=4, horizon_h=1.0, n_hotspots=2)


class TestRoundTrips:
    def test_transitions(self, episode, tmp_path):
        n = write_jsonl(tmp_path / "t.jsonl", episode.transitions, transition_to_dict)
        assert n == len(episode.transitions) > 0
        assert read_jsonl(tmp_path / "t.jsonl", transition_from_dict) == episode.transitions

    def test_decisions_keep_sd_context(self, episode, tmp_path):
        write_jsonl(tmp_path / "d.jsonl", episode.decisions, transition_to_dict)
        back = read_jsonl(tmp_path / "d.jsonl", transition_from_dict)
        assert back == episode.decisions
        assert any(r.s.sd_context is not None for r in back)

    def test_events(self, episode, tmp_path):
        write_jsonl(tmp_path / "e.jsonl", episode.events, event_to_dict)
        assert read_jsonl(tmp_path / "e.jsonl", event_from_dict) == episode.events

    def test_drivers(self, episode, tmp_path):
        write_jsonl(tmp_path / "m.jsonl", episode.metrics.drivers, driver_to_dict)
        assert read_jsonl(tmp_path / "m.jsonl", driver_from_dict) == episode.metrics.drivers

    def test_read_many_concatenates(self, episode, tmp_path):
        half = len(episode.events) // 2
        write_jsonl(tmp_path / "a.jsonl", episode.events[:half], event_to_dict)
        write_jsonl(tmp_path / "b.jsonl", episode.events[half:], event_to_dict)
        assert read_many([tmp_path / "a.jsonl", tmp_path / "b.jsonl"], event_from_dict) == episode.events


class TestErrors:
    def test_bad_line_is_named(self, episode, tmp_path):
        good = json.dumps(event_to_dict(episode.events[0]))
        (tmp_path / "e.jsonl").write_text(good + "\n\n" + good.replace('"kind": "', '"kind": "x') + "\n")
        with pytest.raises(DataError, match=r"e\.jsonl:3:"):
            read_jsonl(tmp_path / "e.jsonl", event_from_dict)

    def test_malformed_json(self, tmp_path):
        (tmp_path / "t.jsonl").write_text("{not json\n")
        with pytest.raises(DataError, match=":1:"):
            read_jsonl(tmp_path / "t.jsonl", transition_from_dict)

    def test_missing_field(self, episode, tmp_path):
        d = transition_to_dict(episode.transitions[0])
        del d["k"]
        (tmp_path / "t.jsonl").write_text(json.dumps(d) + "\n")
        with pytest.raises(DataError, match="KeyError"):
            read_jsonl(tmp_path / "t.jsonl", transition_from_dict)

    def test_inconsistent_option(self, episode, tmp_path):
        rec = next(t for t in episode.transitions if t.option.kind == "reposition")
        d = transition_to_dict(rec)
        d["option"]["kind"] = "dispatch"
        d["option"]["price"] = None
        (tmp_path / "t.jsonl").write_text(json.dumps(d) + "\n")
        with pytest.raises(DataError):
            read_jsonl(tmp_path / "t.jsonl", transition_from_dict)
