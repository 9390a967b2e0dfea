import json

import pytest

from repositioning import cli
from repositioning.cli import EXIT_DATA, EXIT_OK, EXIT_USAGE, main

CITY = ["radius=2", "n_drivers=8", "n_managed=3", "horizon_h=0.5", "n_hotspots=1", "seed=4"]
SMALL_VALUE = {"memory_size": 60, "embed_dim": 5, "hidden": [6, 4], "option_dim": 3, "batch_size": 16,
               "target_sync": 5, "lr": 1e-2}
TIMING = ("cpu_seconds", "policy_cpu_seconds", "cpu_per_review_rel")
SMALL_Q = {"memory_size": 60, "embed_dim": 4, "hidden": [5], "batch_size": 8, "target_sync": 5}


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """City, recorded data and trained models shared by the end-to-end tests."""
    d = tmp_path_factory.mktemp("cli")
    city, data, models = d / "city", d / "data", d / "models"
    models.mkdir()
    assert main(["gen-city", "--out", str(city), "--set", *CITY]) == EXIT_OK
    assert main(["simulate", "--city", str(city), "--seeds", "0-1", "--out", str(data),
                 "--record", "--record-sd"]) == EXIT_OK
    (d / "value.json").write_text(json.dumps(SMALL_VALUE))
    (d / "q.json").write_text(json.dumps(SMALL_Q))
    assert main(["train-value", "--city", str(city), "--data", *map(str, sorted(data.glob("transitions_*"))),
                 "--out", str(models / "value.npz"), "--config", str(d / "value.json"), "--iterations", "30",
                 "--log", str(d / "value_log.csv")]) == EXIT_OK
    assert main(["train-dispatch", "--city", str(city), "--data", *map(str, sorted(data.glob("events_*"))),
                 "--out", str(models / "dispatch.json")]) == EXIT_OK
    assert main(["train-sarsa", "--city", str(city), "--data", *map(str, sorted(data.glob("decisions_*"))),
                 "--out", str(models / "sarsa.npz"), "--config", str(d / "q.json"), "--iterations", "20"]) == EXIT_OK
    assert main(["build-ls-table", "--city", str(city), "--value", str(models / "value.npz"),
                 "--out", str(models / "long_search.json"), "--top", "5", "--bin-min", "10",
                 "--samples", "1"]) == EXIT_OK
    return d


@pytest.fixture(scope="module")
def bench(workdir):
    out = workdir / "bench"
    spec = {"city": str(workdir / "city"), "models": str(workdir / "models"), "out": str(out),
            "roster": ["random", "greedy", "mab", "vps:1", "vps:2:stoch", "sarsa:sdreg"], "seeds": [5, 6]}
    (workdir / "exp.json").write_text(json.dumps(spec))
    assert main(["benchmark", "--spec", str(workdir / "exp.json"), "--n-resamples", "200"]) == EXIT_OK
    return out


class TestUsage:
    def test_no_subcommand(self):
        with pytest.raises(SystemExit) as exc:
            main([])
        assert exc.value.code == EXIT_USAGE

    def test_bad_flag(self):
        with pytest.raises(SystemExit) as exc:
            main(["simulate", "--bogus"])
        assert exc.value.code == EXIT_USAGE

    def test_unknown_scenario_key(self, tmp_path, capsys):
        assert main(["gen-city", "--out", str(tmp_path / "c"), "--set", "wheels=4"]) == EXIT_USAGE
        assert "usage error" in capsys.readouterr().err

    def test_bad_policy_in_roster(self, workdir):
        assert main(["benchmark", "--city", str(workdir / "city"), "--roster", "teleport", "--seeds", "0",
                     "--out", str(workdir / "never")]) == EXIT_USAGE

    def test_spec_missing_fields(self, tmp_path):
        assert main(["benchmark", "--roster", "random"]) == EXIT_USAGE

    def test_seed_ranges(self):
        assert cli._seeds(["0-2", "7"]) == [0, 1, 2, 7]


class TestDataErrors:
    def test_missing_city(self, tmp_path, capsys):
        assert main(["simulate", "--city", str(tmp_path), "--out", str(tmp_path / "o")]) == EXIT_DATA
        assert "scenario.json" in capsys.readouterr().err

    def test_missing_data_file(self, workdir, tmp_path):
        assert main(["train-dispatch", "--city", str(workdir / "city"), "--data", str(tmp_path / "nope.jsonl"),
                     "--out", str(tmp_path / "d.json")]) == EXIT_DATA

    def test_malformed_line_reports_location(self, workdir, tmp_path, capsys):
        src = sorted((workdir / "data").glob("events_*"))[0]
        lines = src.read_text().splitlines()
        lines[1] = "{broken"
        bad = tmp_path / "bad.jsonl"
        bad.write_text("\n".join(lines) + "\n")
        code = main(["train-dispatch", "--city", str(workdir / "city"), "--data", str(bad),
                     "--out", str(tmp_path / "d.json")])
        assert code == EXIT_DATA
        assert f"{bad}:2:" in capsys.readouterr().err

    def test_resume_without_trainer_state(self, workdir, tmp_path):
        from repositioning.valuenet import load_checkpoint, save_checkpoint

        model, _, _ = load_checkpoint(workdir / "models" / "value.npz")
        save_checkpoint(tmp_path / "bare.npz", model, None)
        data = sorted((workdir / "data").glob("transitions_*"))[0]
        assert main(["train-value", "--city", str(workdir / "city"), "--data", str(data),
                     "--out", str(tmp_path / "v.npz"), "--resume", str(tmp_path / "bare.npz")]) == EXIT_DATA


class TestPipeline:
    def test_city_and_records(self, workdir):
        assert (workdir / "city" / "scenario.json").exists()
        prov = json.loads((workdir / "city" / "provenance.json").read_text())
        assert prov["config"]["radius"] == 2
        eps = json.loads((workdir / "data" / "episodes.json").read_text())
        assert [e["seed"] for e in eps["episodes"]] == [0, 1]
        assert (workdir / "value_log.csv").read_text().count("\n") > 1

    def test_resume_value(self, workdir, tmp_path):
        data = sorted((workdir / "data").glob("transitions_*"))[0]
        assert main(["train-value", "--city", str(workdir / "city"), "--data", str(data),
                     "--out", str(tmp_path / "v.npz"), "--resume", str(workdir / "models" / "value.npz"),
                     "--iterations", "5"]) == EXIT_OK

    def test_benchmark_outputs(self, bench):
        res = json.loads((bench / "results.json").read_text())
        assert {(r["policy"], r["seed"]) for r in res["rows"]} == {
            (p, s) for p in res["provenance"]["spec"]["roster"] for s in (5, 6)}
        assert {c["experiment"] for c in res["comparisons"]} == {"greedy", "mab", "vps:1", "vps:2:stoch",
                                                                 "sarsa:sdreg"}
        assert (bench / "results.csv").read_text().startswith(",".join(res["columns"]))
        assert (bench / "mab.json").exists()

    def test_evaluate(self, bench, capsys):
        capsys.readouterr()
        assert main(["evaluate", "--results", str(bench / "results.json"), "--experiment", "vps:1",
                     "--control", "random", "--n-resamples", "200", "--out", str(bench / "eval.json")]) == EXIT_OK
        out = json.loads((bench / "eval.json").read_text())
        assert out["paired_seeds"] == 2
        assert out["bootstrap"]["metric"] == "iph"

    def test_evaluate_unknown_policy(self, bench):
        assert main(["evaluate", "--results", str(bench / "results.json"), "--experiment", "nobody",
                     "--control", "random"]) == EXIT_DATA

    def test_benchmark_is_deterministic(self, workdir, bench):
        again = workdir / "bench2"
        assert main(["benchmark", "--spec", str(workdir / "exp.json"), "--out", str(again),
                     "--n-resamples", "200"]) == EXIT_OK
        strip = lambda p: {k: v for k, v in json.loads(p.read_text()).items() if k != "provenance"}
        a, b = strip(bench / "results.json"), strip(again / "results.json")
        for r in a["rows"] + b["rows"]:
            for k in TIMING:
                r.pop(k)
        for s in (a, b):
            for v in s["summary"].values():
                v.pop("cpu_per_review_s")
        assert a == b


def test_log_level_from_environment(monkeypatch, tmp_path):
    monkeypatch.setenv(cli.LOG_ENV, "debug")
    assert main(["gen-city", "--out", str(tmp_path / "c"), "--set", *CITY]) == EXIT_OK
