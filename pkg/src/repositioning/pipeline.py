"""End-to-end orchestration: data collection, model training, policy roster and benchmarks."""
from __future__ import annotations

import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.stats import wilcoxon

from .baselines import GreedyPolicy, MABPolicy, RandomPolicy
from .dispatchmodel import DispatchClassifier, FeatureSpec, build_training_set
from .dispatchmodel import train as train_classifier
from .evalmetrics import BootstrapReport, DriverRecord, bootstrap_compare
from .qnetsarsa import QConfig, QNet, SarsaData, SarsaPolicy, SarsaTrainer, SDRegConfig
from .simcore.engine import EpisodeResult, TrajectoryEvent, run_episode
from .simcore.entities import TransitionRecord
from .simcore.policy import RepositionPolicy, StayPolicy
from .simcore.scenario import Scenario
from .valuenet import DPEData, DPETrainer, DualValueNet, ValueConfig
from .vpsplanner import LongSearchTable, PlannerConfig, PlanningModels, VPSPolicy

log = logging.getLogger(__name__)


def simulate(scenario: Scenario, policy: RepositionPolicy, seed: int, **overrides) -> EpisodeResult:
    cfg = scenario.sim_config(seed, **overrides)
    return run_episode(policy, cfg, scenario.orders(seed, cfg.horizon_s), scenario.grid, scenario.travel,
                       scenario.driver_weights)


def collect(scenario: Scenario, make_policy: Callable[[], RepositionPolicy], seeds: Sequence[int],
            **overrides) -> list[EpisodeResult]:
    return [simulate(scenario, make_policy(), s, **overrides) for s in seeds]


def value_config_for(scenario: Scenario, **kw) -> ValueConfig:
    return ValueConfig(spatial_edge_m=scenario.config.edge_m, horizon_s=scenario.config.horizon_h * 3600.0, **kw)


def transitions_of(results: Sequence[EpisodeResult]) -> list[TransitionRecord]:
    return [t for r in results for t in r.transitions]


def events_of(results: Sequence[EpisodeResult]) -> list[TrajectoryEvent]:
    return [e for r in results for e in r.events]


def decisions_of(results: Sequence[EpisodeResult]) -> list[TransitionRecord]:
    return [d for r in results for d in r.decisions]


def train_value(scenario: Scenario, transitions: Sequence[TransitionRecord], config: ValueConfig | None = None,
                iterations: int | None = None, log_path=None,
                trainer: DPETrainer | None = None) -> tuple[DualValueNet, DPETrainer]:
    """Fit the dual value network; pass ``trainer`` to continue a resumed run."""
    data = DPEData.from_records(transitions, scenario.grid)
    if trainer is None:
        net = DualValueNet(config or value_config_for(scenario))
        trainer = DPETrainer(net)
    trainer.train(data, iterations, log_path=log_path)
    return trainer.model, trainer


def train_dispatch(scenario: Scenario, events: Sequence[TrajectoryEvent], seed: int = 0,
                   cross_block_h: int = 0) -> DispatchClassifier:
    examples, counts = build_training_set(events)
    log.info("dispatch training set: %s", counts)
    spec = FeatureSpec(n_cells=len(scenario.grid), start_hour=scenario.config.start_hour, cross_block_h=cross_block_h)
    return train_classifier(examples, spec, seed=seed)


def train_sarsa(scenario: Scenario, decisions: Sequence[TransitionRecord], config: QConfig | None = None,
                iterations: int | None = None, trainer: SarsaTrainer | None = None) -> tuple[QNet, SarsaTrainer]:
    data = SarsaData.from_records(decisions, scenario.grid)
    if trainer is None:
        net = QNet(config or QConfig(spatial_edge_m=scenario.config.edge_m))
        trainer = SarsaTrainer(net)
    trainer.train(data, iterations)
    return trainer.model, trainer


def pretrain_mab(scenario: Scenario, seed: int) -> MABPolicy:
    """One simulated day of forced exploration; returns the policy with learned arm statistics."""
    policy = MABPolicy(explore=True)
    simulate(scenario, policy, seed)
    policy.explore = False
    return policy


@dataclass
class ModelBundle:
    value: Optional[DualValueNet] = None
    dispatch: Optional[DispatchClassifier] = None
    sarsa: Optional[QNet] = None
    mab: Optional[MABPolicy] = None
    long_search: Optional[LongSearchTable] = None


def planner_config(scenario: Scenario, depth: int = 2, **kw) -> PlannerConfig:
    return PlannerConfig(depth=depth, cost_per_min=scenario.config.reposition_cost_per_min, **kw)


def parse_policy(spec: str) -> tuple[str, dict]:
    """``random | stay | greedy | mab | vps[:depth][:stoch] | sarsa[:sdreg]``."""
    parts = spec.strip().lower().split(":")
    name, opts = parts[0], {}
    if name == "vps":
        opts["depth"] = int(parts[1]) if len(parts) > 1 and parts[1] else 2
        opts["stochastic"] = "stoch" in parts[2:]
        opts["long_search"] = "nols" not in parts[2:]
    elif name == "sarsa":
        opts["sd_reg"] = "sdreg" in parts[1:]
    elif name not in ("random", "stay", "greedy", "mab"):
        raise ValueError(f"unknown policy {spec!r}")
    return name, opts


def make_policy(spec: str, scenario: Scenario, models: ModelBundle, sd_reg: SDRegConfig | None = None,
                temperature: float = 1.0) -> RepositionPolicy:
    name, opts = parse_policy(spec)
    c = scenario.config
    if name == "random":
        return RandomPolicy()
    if name == "stay":
        return StayPolicy()
    if name == "greedy":
        _need(models.value, spec)
        return GreedyPolicy(models.value, cost_per_min=c.reposition_cost_per_min)
    if name == "mab":
        _need(models.mab, spec)
        return models.mab.frozen_copy()
    if name == "vps":
        _need(models.value, spec)
        _need(models.dispatch, spec)
        policy = VPSPolicy(PlanningModels(models.value, models.dispatch),
                           planner_config(scenario, opts["depth"], temperature=temperature),
                           stochastic=opts["stochastic"],
                           long_search_table=models.long_search if opts["long_search"] else None)
        policy.name = spec
        return policy
    _need(models.sarsa, spec)
    policy = SarsaPolicy(models.sarsa, (sd_reg or SDRegConfig()) if opts["sd_reg"] else None, temperature=temperature)
    policy.name = spec
    return policy


def _need(model, spec):
    if model is None:
        raise ValueError(f"policy {spec!r} needs a trained model that was not supplied")


BENCHMARK_COLUMNS = ["policy", "seed", "iph_managed", "iph_unmanaged", "utilization_managed",
                     "income_managed", "online_hours_managed", "orders_completed", "orders_cancelled",
                     "orders_expired", "cpu_seconds", "policy_cpu_seconds", "n_reviews", "cpu_per_review_rel"]


def result_row(spec: str, seed: int, res: EpisodeResult) -> dict:
    m = res.metrics
    managed = m.group(True)
    return {
        "policy": spec, "seed": seed,
        "iph_managed": m.iph(True) if managed else None,
        "iph_unmanaged": m.iph(False) if m.group(False) else None,
        "utilization_managed": m.utilization(True) if managed else None,
        "income_managed": sum(d.income for d in managed),
        "online_hours_managed": sum(d.online_hours for d in managed),
        "orders_completed": m.orders_completed, "orders_cancelled": m.orders_cancelled,
        "orders_expired": m.orders_expired, "cpu_seconds": res.cpu_seconds,
        "policy_cpu_seconds": res.policy_cpu_seconds, "n_reviews": res.n_reviews,
        "cpu_per_review_rel": None,
    }


@dataclass
class BenchmarkResult:
    rows: list[dict]
    drivers: dict[tuple[str, int], list[DriverRecord]] = field(default_factory=dict)
    episodes: dict[tuple[str, int], EpisodeResult] = field(default_factory=dict)

    def iph(self, spec: str) -> np.ndarray:
        return np.array([r["iph_managed"] for r in self.rows if r["policy"] == spec], dtype=float)

    def cpu_per_review(self, spec: str) -> float:
        rows = [r for r in self.rows if r["policy"] == spec]
        return sum(r["policy_cpu_seconds"] for r in rows) / max(1, sum(r["n_reviews"] for r in rows))

    def managed_drivers(self, spec: str) -> list[DriverRecord]:
        return [d for (p, _s), grp in sorted(self.drivers.items()) if p == spec for d in grp if d.managed]


def _run_cell(scenario: Scenario, spec: str, seed: int, models: ModelBundle, keep: bool, policy_kw: dict):
    t0 = time.process_time()
    res = simulate(scenario, make_policy(spec, scenario, models, **policy_kw), seed)
    log.info("%s seed=%d iph=%.3f cpu=%.1fs", spec, seed, res.metrics.iph(True), time.process_time() - t0)
    return result_row(spec, seed, res), list(res.metrics.drivers), (res if keep else None)


def benchmark(scenario: Scenario, roster: Sequence[str], seeds: Sequence[int], models: ModelBundle,
              keep_episodes: bool = False, reference: str | None = None, jobs: int = 1,
              **policy_kw) -> BenchmarkResult:
    """Run every policy on every seed; seeds share demand and initial positions across policies.

    Each (policy, seed) cell is an isolated episode, so ``jobs > 1`` fans the
    matrix out over processes without changing any result.
    """
    if not roster or not seeds:
        raise ValueError("a benchmark needs at least one policy and one seed")
    for spec in roster:
        parse_policy(spec)
    cells = [(spec, int(seed)) for spec in roster for seed in seeds]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [pool.submit(_run_cell, scenario, spec, seed, models, keep_episodes, policy_kw)
                       for spec, seed in cells]
            outputs = [f.result() for f in futures]
    else:
        outputs = [_run_cell(scenario, spec, seed, models, keep_episodes, policy_kw) for spec, seed in cells]
    out = BenchmarkResult([])
    for (spec, seed), (row, drivers, res) in zip(cells, outputs):
        out.rows.append(row)
        out.drivers[(spec, seed)] = drivers
        if res is not None:
            out.episodes[(spec, seed)] = res
    ref = reference or roster[0]
    base = out.cpu_per_review(ref)
    for r in out.rows:
        per = r["policy_cpu_seconds"] / max(1, r["n_reviews"])
        r["cpu_per_review_rel"] = per / base if base > 0 else None
    return out


def wilcoxon_greater(a: Sequence[float], b: Sequence[float]) -> float:
    """One-sided paired Wilcoxon signed-rank p-value for ``a > b``."""
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    if np.all(a == b):
        return 1.0
    return float(wilcoxon(a, b, alternative="greater").pvalue)


def compare_groups(result: BenchmarkResult, experiment: str, control: str, seed: int = 0,
                   n_resamples: int = 5000) -> BootstrapReport:
    """Bootstrap the experiment policy's managed drivers against the control policy's pool."""
    return bootstrap_compare(result.managed_drivers(experiment), result.managed_drivers(control),
                             n_resamples=n_resamples, seed=seed)
