"""Command-line entry point: city generation, data collection, training, benchmarks and reports.

Exit codes: 0 success, 1 usage error, 2 bad input data, 3 runtime failure.
Set ``REPOSITIONING_LOG_LEVEL`` (DEBUG, INFO, WARNING, ...) for log verbosity.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import platform
import sys
from dataclasses import asdict
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .baselines import MABPolicy
from .dispatchmodel import DispatchClassifier, build_training_set, evaluate as evaluate_classifier
from .evalmetrics import bootstrap_compare
from .pipeline import (BENCHMARK_COLUMNS, ModelBundle, benchmark, make_policy, parse_policy, pretrain_mab,
                       simulate, train_dispatch, train_sarsa, train_value, value_config_for, wilcoxon_greater)
from .qnetsarsa import QConfig, SDRegConfig, load_qnet, save_qnet
from .records import (DataError, driver_from_dict, driver_to_dict, event_from_dict, event_to_dict, read_many,
                      transition_from_dict, transition_to_dict, write_jsonl)
from .simcore.scenario import HOTSPOT_OVERRIDES, Scenario, ScenarioConfig, generate_city
from .valuenet import ValueConfig, load_checkpoint, save_checkpoint
from .vpsplanner import LongSearchTable, build_long_search_table

log = logging.getLogger("repositioning")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_RUNTIME = 0, 1, 2, 3
LOG_ENV = "REPOSITIONING_LOG_LEVEL"

PRESETS = {
    "reference": {},
    "hotspot": dict(HOTSPOT_OVERRIDES),
}

MODEL_FILES = {"value": "value.npz", "dispatch": "dispatch.json", "sarsa": "sarsa.npz", "mab": "mab.json",
               "long_search": "long_search.json"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# -- helpers ----------------------------------------------------------------------

def _provenance(**extra) -> dict:
    return {"package_version": __version__, "python": platform.python_version(), **extra}


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default))


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serialisable: {type(o).__name__}")


def _out_path(path: str | Path | None) -> Optional[Path]:
    if path is None:
        return None
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    return p


def _read_json(path: str | Path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}:{exc.lineno}: {exc.msg}") from exc


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _overrides(pairs: Sequence[str] | None) -> dict:
    out = {}
    for item in pairs or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = _parse_value(v)
    return out


def _load_city(path: str | Path) -> Scenario:
    d = Path(path)
    if not (d / "scenario.json").exists():
        raise DataError(f"{d}: not a city directory (scenario.json missing)")
    return Scenario.load(d)


def _load_models(directory: Optional[str]) -> ModelBundle:
    models = ModelBundle()
    if directory is None:
        return models
    d = Path(directory)
    if not d.is_dir():
        raise DataError(f"{d}: model directory does not exist")
    if (d / MODEL_FILES["value"]).exists():
        models.value = load_checkpoint(d / MODEL_FILES["value"])[0]
    if (d / MODEL_FILES["dispatch"]).exists():
        models.dispatch = DispatchClassifier.load(d / MODEL_FILES["dispatch"])
    if (d / MODEL_FILES["sarsa"]).exists():
        models.sarsa = load_qnet(d / MODEL_FILES["sarsa"])[0]
    if (d / MODEL_FILES["mab"]).exists():
        models.mab = MABPolicy.from_dict(_read_json(d / MODEL_FILES["mab"])["states"])
    if (d / MODEL_FILES["long_search"]).exists():
        models.long_search = LongSearchTable.from_dict(_read_json(d / MODEL_FILES["long_search"]))
    return models


def _seeds(values: Sequence[str]) -> list[int]:
    """Accept ``0 1 2`` or ranges such as ``0-9``."""
    out: list[int] = []
    for v in values:
        if "-" in v.strip("-"):
            a, b = v.split("-", 1)
            out.extend(range(int(a), int(b) + 1))
        else:
            out.append(int(v))
    return out


def _sd_reg(args) -> SDRegConfig:
    return SDRegConfig(alpha=args.sd_alpha, beta=args.sd_beta)


# -- subcommands ---------------------------------------------------------------------

def cmd_gen_city(args) -> int:
    base = dict(PRESETS[args.preset])
    if args.config:
        base.update(_read_json(args.config))
    base.update(_overrides(args.set))
    if args.seed is not None:
        base["seed"] = args.seed
    try:
        cfg = ScenarioConfig.from_dict(base)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from exc
    city = generate_city(cfg)
    city.save(args.out)
    _write_json(Path(args.out) / "provenance.json", _provenance(command="gen-city", config=cfg.to_dict(),
                                                                seed=cfg.seed))
    print(f"city with {len(city.grid)} cells ({int(city.grid.valid_mask.sum())} valid) written to {args.out}")
    return EXIT_OK


def cmd_simulate(args) -> int:
    city = _load_city(args.city)
    models = _load_models(args.models)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    episodes = []
    for seed in _seeds(args.seeds):
        policy = make_policy(args.policy, city, models, sd_reg=_sd_reg(args), temperature=args.temperature)
        res = simulate(city, policy, seed, record_sd_context=args.record_sd)
        tag = f"seed{seed}"
        if args.record:
            write_jsonl(out / f"transitions_{tag}.jsonl", res.transitions, transition_to_dict)
            write_jsonl(out / f"decisions_{tag}.jsonl", res.decisions, transition_to_dict)
            write_jsonl(out / f"events_{tag}.jsonl", res.events, event_to_dict)
        episodes.append({"seed": seed, "sim_config": res.config, "metrics": res.metrics.to_dict(),
                         "cpu_seconds": res.cpu_seconds, "policy_cpu_seconds": res.policy_cpu_seconds,
                         "n_reviews": res.n_reviews})
        print(f"{args.policy} seed={seed} managed IPH={res.metrics.iph(True):.4f}")
    _write_json(out / "episodes.json", {"provenance": _provenance(command="simulate", policy=args.policy,
                                                                  city=city.config.to_dict(),
                                                                  seeds=_seeds(args.seeds)),
                                        "episodes": episodes})
    return EXIT_OK


def _data_files(paths: Sequence[str]) -> list[Path]:
    files = []
    for p in paths:
        path = Path(p)
        if not path.exists():
            raise DataError(f"{path}: no such file")
        files.append(path)
    return files


def cmd_train_value(args) -> int:
    city = _load_city(args.city)
    files = _data_files(args.data)
    records = read_many(files, transition_from_dict)
    trainer = None
    if args.resume:
        _model, trainer, _extra = load_checkpoint(args.resume)
        if trainer is None:
            raise DataError(f"{args.resume}: checkpoint carries no trainer state to resume")
        cfg = trainer.config
    else:
        kw = _read_json(args.config) if args.config else {}
        if args.seed is not None:
            kw["seed"] = args.seed
        cfg = ValueConfig.from_dict({**value_config_for(city).to_dict(), **kw})
    net, trainer = train_value(city, records, cfg, iterations=args.iterations, log_path=_out_path(args.log), trainer=trainer)
    save_checkpoint(_out_path(args.out), net, trainer, extra=_provenance(command="train-value", city=city.config.to_dict(),
                                                              data=[str(f) for f in files], seed=cfg.seed,
                                                              n_records=len(records)))
    first, last = trainer.history[0], trainer.history[-1]
    print(f"trained {trainer.step} steps on {len(records)} transitions; loss_v {first[1]:.4g} -> {last[1]:.4g}")
    return EXIT_OK


def cmd_train_dispatch(args) -> int:
    city = _load_city(args.city)
    files = _data_files(args.data)
    events = read_many(files, event_from_dict)
    clf = train_dispatch(city, events, seed=args.seed, cross_block_h=args.cross_block_h)
    examples, counts = build_training_set(events)
    clf.info.update(_provenance(command="train-dispatch", city=city.config.to_dict(),
                                data=[str(f) for f in files], counts=counts,
                                training_metrics=evaluate_classifier(clf, examples)))
    clf.save(_out_path(args.out))
    print(f"dispatch model from {counts['positives']} positives / {counts['negatives']} negatives; "
          f"training AUC {clf.info['training_metrics']['auc']:.3f}")
    return EXIT_OK


def cmd_train_sarsa(args) -> int:
    city = _load_city(args.city)
    files = _data_files(args.data)
    records = read_many(files, transition_from_dict)
    trainer = None
    if args.resume:
        _net, trainer, _extra = load_qnet(args.resume)
        if trainer is None:
            raise DataError(f"{args.resume}: checkpoint carries no trainer state to resume")
        cfg = trainer.config
    else:
        kw = _read_json(args.config) if args.config else {}
        kw.setdefault("spatial_edge_m", city.config.edge_m)
        if args.seed is not None:
            kw["seed"] = args.seed
        cfg = QConfig(**kw)
    net, trainer = train_sarsa(city, records, cfg, iterations=args.iterations, trainer=trainer)
    save_qnet(_out_path(args.out), net, trainer, extra=_provenance(command="train-sarsa", city=city.config.to_dict(),
                                                        data=[str(f) for f in files], seed=cfg.seed))
    print(f"trained {trainer.step} SARSA steps on {len(records)} decisions; final loss {trainer.history[-1][1]:.4g}")
    return EXIT_OK


def cmd_build_ls_table(args) -> int:
    city = _load_city(args.city)
    model, _trainer, _extra = load_checkpoint(args.value)
    table = build_long_search_table(model, city.grid, city.config.horizon_h * 3600.0, top=args.top,
                                    bin_min=args.bin_min, samples_per_bin=args.samples)
    d = table.to_dict()
    d["provenance"] = _provenance(command="build-ls-table", city=city.config.to_dict(), value=str(args.value),
                                  top=args.top, bin_min=args.bin_min, samples=args.samples)
    _write_json(Path(args.out), d)
    print(f"long-search table with {len(table.entries)} intervals written to {args.out}")
    return EXIT_OK


def _experiment_spec(args) -> dict:
    spec = _read_json(args.spec) if args.spec else {}
    for key in ("city", "models", "out", "reference"):
        if getattr(args, key) is not None:
            spec[key] = getattr(args, key)
    if args.roster:
        spec["roster"] = args.roster
    if args.seeds:
        spec["seeds"] = _seeds(args.seeds)
    for key in ("mab_seed", "jobs", "temperature", "sd_alpha", "sd_beta", "n_resamples"):
        spec.setdefault(key, getattr(args, key))
    missing = [k for k in ("city", "roster", "seeds", "out") if not spec.get(k)]
    if missing:
        raise UsageError(f"experiment spec lacks {', '.join(missing)}")
    spec["seeds"] = [int(s) for s in spec["seeds"]]
    for p in spec["roster"]:
        try:
            parse_policy(p)
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
    return spec


def cmd_benchmark(args) -> int:
    spec = _experiment_spec(args)
    city = _load_city(spec["city"])
    models = _load_models(spec.get("models"))
    if any(parse_policy(p)[0] == "mab" for p in spec["roster"]) and models.mab is None:
        log.info("pretraining the bandit baseline on seed %d", spec["mab_seed"])
        models.mab = pretrain_mab(city, spec["mab_seed"])
        _write_json(Path(spec["out"]) / MODEL_FILES["mab"],
                    {"provenance": _provenance(command="benchmark:pretrain-mab", seed=spec["mab_seed"],
                                               city=city.config.to_dict()),
                     "states": models.mab.to_dict()})
    result = benchmark(city, spec["roster"], spec["seeds"], models, reference=spec.get("reference"),
                       jobs=spec["jobs"], sd_reg=SDRegConfig(spec["sd_alpha"], spec["sd_beta"]),
                       temperature=spec["temperature"])
    out = Path(spec["out"])
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "results.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=BENCHMARK_COLUMNS)
        w.writeheader()
        for row in result.rows:
            w.writerow({k: ("" if row[k] is None else row[k]) for k in BENCHMARK_COLUMNS})
    reference = spec.get("reference") or spec["roster"][0]
    comparisons = []
    for p in spec["roster"]:
        if p == reference:
            continue
        entry = {"experiment": p, "control": reference,
                 "wilcoxon_p_greater": wilcoxon_greater(result.iph(p), result.iph(reference))}
        exp, ctl = result.managed_drivers(p), result.managed_drivers(reference)
        if exp and len(ctl) >= len(exp):
            entry["bootstrap"] = asdict(bootstrap_compare(exp, ctl, n_resamples=spec["n_resamples"], seed=0))
        comparisons.append(entry)
    summary = {p: {"mean_iph_managed": float(np.mean(result.iph(p))),
                   "cpu_per_review_s": result.cpu_per_review(p)} for p in spec["roster"]}
    _write_json(out / "results.json", {
        "provenance": _provenance(command="benchmark", spec=spec, city=city.config.to_dict()),
        "columns": BENCHMARK_COLUMNS, "rows": result.rows, "summary": summary, "comparisons": comparisons,
        "drivers": [{"policy": p, "seed": s, "drivers": [driver_to_dict(d) for d in grp]}
                    for (p, s), grp in sorted(result.drivers.items())],
    })
    for p in spec["roster"]:
        print(f"{p:>16s}  mean managed IPH {summary[p]['mean_iph_managed']:.4f}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    res = _read_json(args.results)
    try:
        blocks = res["drivers"]
        rows = res["rows"]
    except KeyError as exc:
        raise DataError(f"{args.results}: missing key {exc}") from exc
    pick = lambda p: [driver_from_dict(d) for b in blocks if b["policy"] == p for d in b["drivers"]
                      if d.get("managed")]
    exp, ctl = pick(args.experiment), pick(args.control)
    if not exp or not ctl:
        raise DataError(f"{args.results}: no managed drivers recorded for {args.experiment!r} or {args.control!r}")
    report = bootstrap_compare(exp, ctl, n_resamples=args.n_resamples, metric=args.metric, seed=args.seed)
    by_seed = lambda p: {r["seed"]: r["iph_managed"] for r in rows if r["policy"] == p}
    a, b = by_seed(args.experiment), by_seed(args.control)
    common = sorted(set(a) & set(b))
    out = {"provenance": _provenance(command="evaluate", results=str(args.results), seed=args.seed),
           "bootstrap": asdict(report), "paired_seeds": len(common),
           "wilcoxon_p_greater": wilcoxon_greater([a[s] for s in common], [b[s] for s in common]) if common else None}
    text = json.dumps(out, indent=2, sort_keys=True)
    if args.out:
        _out_path(args.out).write_text(text)
    print(text)
    return EXIT_OK


# -- parser ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="repositioning", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-city", help="generate a synthetic city directory")
    g.add_argument("--out", required=True)
    g.add_argument("--preset", choices=sorted(PRESETS), default="reference")
    g.add_argument("--config", help="scenario JSON; keys override the preset")
    g.add_argument("--set", nargs="*", metavar="KEY=VALUE", help="scenario overrides applied last")
    g.add_argument("--seed", type=int)
    g.set_defaults(func=cmd_gen_city)

    def policy_flags(q):
        q.add_argument("--temperature", type=float, default=1.0, help="Boltzmann temperature for stochastic policies")
        q.add_argument("--sd-alpha", type=float, default=SDRegConfig.alpha)
        q.add_argument("--sd-beta", type=float, default=SDRegConfig.beta)

    s = sub.add_parser("simulate", help="run episodes with one policy, optionally recording training data")
    s.add_argument("--city", required=True)
    s.add_argument("--policy", default="random")
    s.add_argument("--seeds", nargs="+", default=["0"])
    s.add_argument("--models", help="directory with trained model files")
    s.add_argument("--out", required=True)
    s.add_argument("--record", action="store_true", help="write transitions, decisions and events as JSON lines")
    s.add_argument("--record-sd", action="store_true", help="attach supply-demand context to recorded states")
    policy_flags(s)
    s.set_defaults(func=cmd_simulate)

    v = sub.add_parser("train-value", help="dual policy evaluation of the state value network")
    v.add_argument("--city", required=True)
    v.add_argument("--data", nargs="+", required=True, help="transition JSON-lines files")
    v.add_argument("--out", required=True)
    v.add_argument("--config", help="value-network JSON config")
    v.add_argument("--iterations", type=int)
    v.add_argument("--seed", type=int)
    v.add_argument("--resume", help="continue from this checkpoint")
    v.add_argument("--log", help="CSV training log")
    v.set_defaults(func=cmd_train_value)

    d = sub.add_parser("train-dispatch", help="fit the dispatch probability classifier")
    d.add_argument("--city", required=True)
    d.add_argument("--data", nargs="+", required=True, help="trajectory-event JSON-lines files")
    d.add_argument("--out", required=True)
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--cross-block-h", type=int, default=0, help="hours per cell x time interaction block (0 = off)")
    d.set_defaults(func=cmd_train_dispatch)

    q = sub.add_parser("train-sarsa", help="SARSA training of the Q-network baseline")
    q.add_argument("--city", required=True)
    q.add_argument("--data", nargs="+", required=True, help="decision JSON-lines files (recorded with --record-sd)")
    q.add_argument("--out", required=True)
    q.add_argument("--config", help="Q-network JSON config")
    q.add_argument("--iterations", type=int)
    q.add_argument("--seed", type=int)
    q.add_argument("--resume")
    q.set_defaults(func=cmd_train_sarsa)

    t = sub.add_parser("build-ls-table", help="precompute the long-search destination table")
    t.add_argument("--city", required=True)
    t.add_argument("--value", required=True, help="value checkpoint")
    t.add_argument("--out", required=True)
    t.add_argument("--top", type=int, default=200)
    t.add_argument("--bin-min", type=float, default=20.0)
    t.add_argument("--samples", type=int, default=4)
    t.set_defaults(func=cmd_build_ls_table)

    b = sub.add_parser("benchmark", help="policy x seed matrix with paired tests and bootstrap comparisons")
    b.add_argument("--spec", help="experiment JSON (city, roster, seeds, out, models, ...); flags override it")
    b.add_argument("--city")
    b.add_argument("--roster", nargs="+", help="e.g. random greedy mab vps:2 vps:2:stoch sarsa:sdreg")
    b.add_argument("--seeds", nargs="+")
    b.add_argument("--models")
    b.add_argument("--out")
    b.add_argument("--reference", help="policy used as control and CPU baseline (default: first)")
    b.add_argument("--mab-seed", type=int, default=10_000)
    b.add_argument("--jobs", type=int, default=1)
    b.add_argument("--n-resamples", type=int, default=5000)
    policy_flags(b)
    b.set_defaults(func=cmd_benchmark)

    e = sub.add_parser("evaluate", help="bootstrap and paired comparison of two policies from benchmark output")
    e.add_argument("--results", required=True, help="results.json written by benchmark")
    e.add_argument("--experiment", required=True)
    e.add_argument("--control", required=True)
    e.add_argument("--metric", choices=["iph", "utilization"], default="iph")
    e.add_argument("--n-resamples", type=int, default=5000)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out")
    e.set_defaults(func=cmd_evaluate)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    level = os.environ.get(LOG_ENV, "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # noqa: BLE001 - top-level boundary
        log.debug("runtime failure", exc_info=True)
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
