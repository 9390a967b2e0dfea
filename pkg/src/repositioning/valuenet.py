"""Spatiotemporal state values V(s) and V(s | dispatch) learned by dual policy evaluation.

States enter through a sparse tile-coding ("cerebellar") layer: each of ``n``
offset hexagonal lattices, crossed with a time bin, hashes the state to one
row of a shared memory, and the embedding is the mean of those rows.  A small
ReLU trunk feeds two heads sharing the representation: the marginal value and
the value conditioned on a binary option ``b`` (1 = dispatched).

A tabular model with the same interface backs small exact experiments.
"""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .hexgrid import HexGrid, axial_round_array, xy_to_axial_frac
from .nn import MLP, Adam, he_init, sparse_rows
from .simcore.entities import DriverState, TransitionRecord

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


def discounted_reward(R, k, gamma: float):
    """Spread a reward collected over ``k`` steps: ``R (g^k - 1) / (k (g - 1))``."""
    k_arr = np.asarray(k)
    if np.any(k_arr < 1):
        raise ValueError("duration k must be at least one step")
    if not 0.0 < gamma < 1.0:
        raise ValueError("gamma must lie in (0, 1)")
    factor = np.where(k_arr == 1, 1.0, (np.power(gamma, k_arr) - 1.0) / (k_arr * (gamma - 1.0)))
    out = np.asarray(R, dtype=float) * factor
    return float(out) if out.ndim == 0 else out


@dataclass
class ValueConfig:
    gamma: float = 0.92
    lr: float = 3e-4
    reg: float = 1e-4
    iterations: int = 20000
    batch_size: int = 256
    target_sync: int = 1000
    n_quantizers: int = 3
    memory_size: int = 20000
    embed_dim: int = 50
    hidden: tuple = (32, 128, 32)
    option_dim: int = 8
    time_bin_min: float = 10.0
    spatial_edge_m: float = 800.0
    horizon_s: float = math.inf
    step_s: float = 60.0
    seed: int = 0
    log_every: int = 100

    def __post_init__(self):
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must lie in (0, 1)")
        if self.n_quantizers < 1 or self.memory_size < self.n_quantizers:
            raise ValueError("need at least one quantizer and one memory row per quantizer")
        self.hidden = tuple(int(h) for h in self.hidden)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        d["horizon_s"] = None if math.isinf(self.horizon_s) else self.horizon_s
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ValueConfig":
        d = dict(d)
        if d.get("horizon_s") is None:
            d["horizon_s"] = math.inf
        return cls(**d)


# -- cerebellar embedding ---------------------------------------------------

_MIX = (np.uint64(0x9E3779B97F4A7C15), np.uint64(0xBF58476D1CE4E5B9),
        np.uint64(0x94D049BB133111EB), np.uint64(0xD6E8FEB86659FD93))


def _hash_keys(cols: Sequence[np.ndarray]) -> np.ndarray:
    h = np.zeros(len(cols[0]), dtype=np.uint64)
    with np.errstate(over="ignore"):
        for c, mix in zip(cols, _MIX):
            h ^= c.astype(np.int64).astype(np.uint64) * mix
            h ^= h >> np.uint64(31)
            h *= _MIX[1]
            h ^= h >> np.uint64(29)
    return h


class CerebellarEmbedding:
    """Hashed tile coding over (x, y, time).

    Quantizer ``i`` uses a hexagonal lattice with edge ``edge * 2**i`` shifted
    by ``i / n`` of a tile, and ``time_bin_min`` bins shifted by ``i / n`` of a
    bin.  Its hash lands in its own slice of memory, so ``c(s)`` always has
    exactly ``n`` unit entries.
    """

    def __init__(self, n: int, memory_size: int, dim: int, edge_m: float, time_bin_min: float,
                 rng: np.random.Generator):
        self.n, self.A, self.m = n, memory_size, dim
        self.edge_m, self.time_bin_s = edge_m, time_bin_min * 60.0
        self.slice = memory_size // n
        self.theta = rng.normal(0.0, 0.1, size=(memory_size, dim))

    def indices(self, xy: np.ndarray, t_s: np.ndarray) -> np.ndarray:
        """``(B, n)`` active memory rows."""
        xy = np.asarray(xy, dtype=float).reshape(-1, 2)
        t_s = np.asarray(t_s, dtype=float).reshape(-1)
        out = np.empty((len(xy), self.n), dtype=np.int64)
        for i in range(self.n):
            edge = self.edge_m * 2 ** i
            shift = i / self.n
            x = xy[:, 0] + shift * edge * math.sqrt(3.0)
            y = xy[:, 1] + shift * edge * 1.5
            q, r = axial_round_array(*xy_to_axial_frac(x, y, edge))
            tb = np.floor(t_s / self.time_bin_s + shift).astype(np.int64)
            h = _hash_keys([q, r, tb, np.full(len(xy), i)])
            out[:, i] = i * self.slice + (h % np.uint64(self.slice)).astype(np.int64)
        return out

    def activation(self, xy, t_s) -> np.ndarray:
        idx = self.indices(xy, t_s)
        c = np.zeros((len(idx), self.A))
        np.add.at(c, (np.repeat(np.arange(len(idx)), self.n), idx.ravel()), 1.0)
        return c

    def embed(self, idx: np.ndarray, theta: np.ndarray | None = None) -> np.ndarray:
        theta = self.theta if theta is None else theta
        return theta[idx].sum(axis=1) / self.n


# -- value models -------------------------------------------------------------

class ValueModel:
    """Common interface: raw head values at (position, time, cell); zero past the horizon."""

    config: ValueConfig

    def evaluate(self, head: str, xy: np.ndarray, t_s: np.ndarray, cells: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def discounted(self, head: str, xy, t_s, cells, lookahead_min) -> np.ndarray:
        """``gamma**dt * head(s advanced by dt)``; ``dt`` in minutes (steps)."""
        dt = np.asarray(lookahead_min, dtype=float)
        t_s = np.asarray(t_s, dtype=float) + dt * 60.0
        return self.config.gamma ** (dt * 60.0 / self.config.step_s) * self.evaluate(head, xy, t_s, cells)


def _state_arrays(grid: HexGrid | None, states: Sequence[DriverState]):
    xy = np.array([grid.to_xy(*s.location) if grid is not None else (0.0, 0.0) for s in states], dtype=float)
    t = np.array([s.time for s in states], dtype=float)
    cells = np.array([s.cell for s in states], dtype=np.int64)
    return xy.reshape(-1, 2), t, cells


def value(model: ValueModel, s: DriverState, dt_min: float = 0.0, grid: HexGrid | None = None) -> float:
    xy, t, c = _state_arrays(grid, [s])
    return float(model.discounted("v", xy, t, c, dt_min)[0])


def conditional_value(model: ValueModel, s: DriverState, dt_min: float = 0.0, grid: HexGrid | None = None) -> float:
    xy, t, c = _state_arrays(grid, [s])
    return float(model.discounted("vb", xy, t, c, dt_min)[0])


class DualValueNet(ValueModel):
    def __init__(self, config: ValueConfig | None = None):
        self.config = cfg = config or ValueConfig()
        rng = np.random.default_rng(cfg.seed)
        self.embedding = CerebellarEmbedding(cfg.n_quantizers, cfg.memory_size, cfg.embed_dim,
                                             cfg.spatial_edge_m, cfg.time_bin_min, rng)
        self.trunk = MLP([cfg.embed_dim, *cfg.hidden], rng, "trunk/")
        h = cfg.hidden[-1]
        self.params: dict[str, np.ndarray] = {"theta": self.embedding.theta}
        self.params.update(self.trunk.params)
        self.params.update({
            "v/w": he_init(rng, h, 1)[:, 0], "v/b": np.zeros(1),
            "vb/Wp": he_init(rng, h, cfg.option_dim), "vb/bp": np.zeros(cfg.option_dim),
            "vb/E": rng.normal(0.0, 1.0, size=(2, cfg.option_dim)),
            "vb/w": he_init(rng, cfg.option_dim, 1)[:, 0], "vb/b": np.zeros(1),
        })
        # the trunk and embedding read their weights from self.params
        self.trunk.params = self.params
        self.embedding.theta = self.params["theta"]

    def reg_names(self) -> list[str]:
        return self.trunk.weight_names() + ["v/w", "vb/Wp", "vb/w"]

    def forward(self, idx: np.ndarray, b: np.ndarray, params=None):
        p = self.params if params is None else params
        e = self.embedding.embed(idx, p["theta"])
        h, cache = self.trunk.forward(e, p)
        v = h @ p["v/w"] + p["v/b"][0]
        u = h @ p["vb/Wp"] + p["vb/bp"]
        eb = p["vb/E"][b]
        z = u * eb
        vb = z @ p["vb/w"] + p["vb/b"][0]
        return v, vb, (idx, b, h, cache, u, eb, z)

    def evaluate(self, head, xy, t_s, cells=None):
        xy = np.asarray(xy, dtype=float).reshape(-1, 2)
        t_s = np.broadcast_to(np.asarray(t_s, dtype=float), (len(xy),))
        out = np.zeros(len(xy))
        alive = t_s < self.config.horizon_s
        if alive.any():
            idx = self.embedding.indices(xy[alive], t_s[alive])
            v, vb, _ = self.forward(idx, np.ones(int(alive.sum()), dtype=np.int64))
            out[alive] = v if head == "v" else vb
        return out

    def loss_and_grads(self, idx, y_v, idx_b, y_b):
        """Squared TD loss on both heads plus L2 on layer weights.

        ``idx``/``y_v`` feed the marginal head; ``idx_b``/``y_b`` (dispatch
        records only) feed the conditional head with ``b = 1``.
        """
        p, reg = self.params, self.config.reg
        nb = len(idx_b)
        all_idx = np.concatenate([idx, idx_b]) if nb else idx
        b = np.ones(len(all_idx), dtype=np.int64)
        v, vb, (_, _, h, cache, u, eb, z) = self.forward(all_idx, b)
        n = len(idx)
        rv = v[:n] - y_v
        loss_v = 0.5 * float(np.mean(rv ** 2))
        dv = np.zeros(len(all_idx))
        dv[:n] = rv / n
        dvb = np.zeros(len(all_idx))
        loss_b = 0.0
        if nb:
            rb = vb[n:] - y_b
            loss_b = 0.5 * float(np.mean(rb ** 2))
            dvb[n:] = rb / nb
        grads: dict[str, object] = {
            "v/w": h.T @ dv, "v/b": np.array([dv.sum()]),
            "vb/w": z.T @ dvb, "vb/b": np.array([dvb.sum()]),
        }
        dz = dvb[:, None] * p["vb/w"][None, :]
        du = dz * eb
        dE = np.zeros_like(p["vb/E"])
        np.add.at(dE, b, dz * u)
        grads["vb/E"] = dE
        grads["vb/Wp"] = h.T @ du
        grads["vb/bp"] = du.sum(axis=0)
        dh = dv[:, None] * p["v/w"][None, :] + du @ p["vb/Wp"].T
        de = self.trunk.backward(dh, cache, grads)
        grads["theta"] = sparse_rows(all_idx.ravel(), np.repeat(de / self.embedding.n, self.embedding.n, axis=0))
        loss_reg = 0.0
        for name in self.reg_names():
            loss_reg += 0.5 * reg * float(np.sum(p[name] ** 2))
            grads[name] = grads[name] + reg * p[name]
        return loss_v + loss_b + loss_reg, (loss_v, loss_b), grads


class TabularDualValue(ValueModel):
    """Table of V and V(.|b=1) keyed by (cell, time bin)."""

    def __init__(self, n_cells: int, config: ValueConfig | None = None, n_time_bins: int = 1,
                 time_bin_s: float = math.inf):
        self.config = config or ValueConfig()
        self.n_cells, self.n_time_bins, self.time_bin_s = n_cells, n_time_bins, time_bin_s
        self.V = np.zeros(n_cells * n_time_bins)
        self.Vb = np.zeros(n_cells * n_time_bins)

    def keys(self, cells, t_s) -> np.ndarray:
        cells = np.asarray(cells, dtype=np.int64)
        if self.n_time_bins == 1:
            return cells
        tb = np.clip((np.asarray(t_s, dtype=float) // self.time_bin_s).astype(np.int64), 0, self.n_time_bins - 1)
        return cells * self.n_time_bins + tb

    def evaluate(self, head, xy, t_s, cells):
        cells = np.asarray(cells, dtype=np.int64).reshape(-1)
        t_s = np.broadcast_to(np.asarray(t_s, dtype=float), cells.shape)
        table = self.V if head == "v" else self.Vb
        return np.where(t_s < self.config.horizon_s, table[self.keys(cells, t_s)], 0.0)


# -- training data ------------------------------------------------------------

@dataclass
class DPEData:
    xy: np.ndarray
    t: np.ndarray
    cells: np.ndarray
    xy_next: np.ndarray
    t_next: np.ndarray
    cells_next: np.ndarray
    reward: np.ndarray
    k: np.ndarray
    terminal: np.ndarray
    dispatch: np.ndarray
    rejected: int = 0

    def __len__(self) -> int:
        return len(self.reward)

    @classmethod
    def from_records(cls, records: Iterable[TransitionRecord], grid: HexGrid | None = None) -> "DPEData":
        good, rejected = [], 0
        for rec in records:
            vals = (rec.reward, rec.k, rec.s.time, rec.s_next.time, *rec.s.location, *rec.s_next.location)
            if not all(math.isfinite(v) for v in vals) or rec.k < 1:
                rejected += 1
                log.warning("rejected transition with non-finite fields: driver=%s t=%s", rec.driver_id, rec.s.time)
                continue
            good.append(rec)
        xy, t, c = _state_arrays(grid, [r.s for r in good])
        xyn, tn, cn = _state_arrays(grid, [r.s_next for r in good])
        return cls(
            xy=xy, t=t, cells=c, xy_next=xyn, t_next=tn, cells_next=cn,
            reward=np.array([r.reward for r in good], dtype=float),
            k=np.array([r.k for r in good], dtype=np.int64),
            terminal=np.array([r.terminal for r in good], dtype=bool),
            # b comes from the option kind: a free reposition has R = 0 yet is idle movement
            dispatch=np.array([r.option.is_dispatch for r in good], dtype=bool),
            rejected=rejected,
        )

    def subset(self, idx: np.ndarray) -> "DPEData":
        return DPEData(*(getattr(self, f)[idx] for f in (
            "xy", "t", "cells", "xy_next", "t_next", "cells_next", "reward", "k", "terminal", "dispatch")))


def dpe_targets(data: DPEData, gamma: float, v_next_marginal: np.ndarray, v_next_cond_source: np.ndarray):
    """Targets for the marginal head and (dispatch rows only) the conditional head.

    The marginal head bootstraps on ``v_next_marginal`` (lagged values); the
    conditional head bootstraps on the current marginal values
    ``v_next_cond_source``.  Terminal next states contribute zero.
    """
    base = discounted_reward(data.reward, data.k, gamma)
    disc = np.where(data.terminal, 0.0, np.power(gamma, data.k))
    y_v = base + disc * v_next_marginal
    y_b = (base + disc * v_next_cond_source)[data.dispatch]
    return y_v, y_b


class DPETrainer:
    """Mini-batch dual policy evaluation with a periodically synced target copy."""

    def __init__(self, model: DualValueNet | TabularDualValue, config: ValueConfig | None = None,
                 tabular_lr: float = 1.0):
        self.model = model
        self.config = config or model.config
        self.rng = np.random.default_rng(self.config.seed + 1)
        self.step = 0
        self.history: list[tuple[int, float, float]] = []
        self.tabular_lr = tabular_lr
        if isinstance(model, DualValueNet):
            self.target = {k: v.copy() for k, v in model.params.items()}
            self.adam = Adam(model.params, lr=self.config.lr)

    def _target_values(self, data: DPEData, params) -> np.ndarray:
        m: DualValueNet = self.model
        alive = ~data.terminal
        out = np.zeros(len(data))
        if alive.any():
            idx = m.embedding.indices(data.xy_next[alive], data.t_next[alive])
            v, _, _ = m.forward(idx, np.ones(int(alive.sum()), dtype=np.int64), params)
            out[alive] = v
        return out

    def update(self, batch: DPEData) -> tuple[float, float]:
        """One DPE step on ``batch``; returns the TD losses of the two heads."""
        m = self.model
        g = self.config.gamma
        if isinstance(m, TabularDualValue):
            return self._tabular_update(batch)
        v_lag = self._target_values(batch, self.target)
        v_now = self._target_values(batch, m.params)
        y_v, y_b = dpe_targets(batch, g, v_lag, v_now)
        idx = m.embedding.indices(batch.xy, batch.t)
        _, losses, grads = m.loss_and_grads(idx, y_v, idx[batch.dispatch], y_b)
        self.adam.step(grads)
        self.step += 1
        if self.step % self.config.target_sync == 0:
            for k, v in m.params.items():
                self.target[k][...] = v
        return losses

    def _tabular_update(self, batch: DPEData) -> tuple[float, float]:
        """Synchronous sweep: each visited key moves toward its mean target."""
        m: TabularDualValue = self.model
        g = self.config.gamma
        keys = m.keys(batch.cells, batch.t)
        knext = m.keys(batch.cells_next, batch.t_next)
        alive_t = batch.t_next < m.config.horizon_s
        v_lag = np.where(alive_t, m.V[knext], 0.0)
        y_v, _ = dpe_targets(batch, g, v_lag, v_lag)
        size = len(m.V)
        cnt = np.bincount(keys, minlength=size)
        seen = cnt > 0
        mean_v = np.bincount(keys, weights=y_v, minlength=size)[seen] / cnt[seen]
        loss_v = 0.5 * float(np.mean((m.V[keys] - y_v) ** 2))
        m.V[seen] += self.tabular_lr * (mean_v - m.V[seen])
        # the conditional table bootstraps on the freshly updated marginal table
        v_now = np.where(alive_t, m.V[knext], 0.0)
        _, y_b = dpe_targets(batch, g, v_now, v_now)
        loss_b = 0.0
        kb = keys[batch.dispatch]
        if len(kb):
            cb = np.bincount(kb, minlength=size)
            sb = cb > 0
            mean_b = np.bincount(kb, weights=y_b, minlength=size)[sb] / cb[sb]
            loss_b = 0.5 * float(np.mean((m.Vb[kb] - y_b) ** 2))
            m.Vb[sb] += self.tabular_lr * (mean_b - m.Vb[sb])
        self.step += 1
        return loss_v, loss_b

    def train(self, data: DPEData, iterations: int | None = None, full_batch: bool = False,
              log_path: str | Path | None = None) -> list[tuple[int, float, float]]:
        if len(data) == 0:
            raise ValueError("no valid transitions to train on")
        n_iter = self.config.iterations if iterations is None else iterations
        for _ in range(n_iter):
            if full_batch:
                batch = data
            else:
                batch = data.subset(self.rng.integers(0, len(data), size=min(self.config.batch_size, len(data))))
            lv, lb = self.update(batch)
            if self.step % self.config.log_every == 0 or self.step == 1:
                self.history.append((self.step, lv, lb))
        if log_path is not None:
            write_training_log(self.history, log_path)
        return self.history


def dpe_update_batch(trainer: DPETrainer, records: Sequence[TransitionRecord],
                     grid: HexGrid | None = None) -> tuple[float, float]:
    """Apply one DPE update from a batch of transition records."""
    data = DPEData.from_records(records, grid)
    if len(data) == 0:
        return 0.0, 0.0
    return trainer.update(data)


def write_training_log(history, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "loss_v", "loss_vb"])
        for row in history:
            w.writerow([row[0], repr(row[1]), repr(row[2])])


# -- checkpoints ----------------------------------------------------------------

def save_checkpoint(path: str | Path, model: DualValueNet | TabularDualValue,
                    trainer: DPETrainer | None = None, extra: dict | None = None) -> None:
    arrays: dict[str, np.ndarray] = {}
    meta: dict = {"version": CHECKPOINT_VERSION, "config": model.config.to_dict(), "extra": extra or {}}
    if isinstance(model, DualValueNet):
        meta["kind"] = "dual_value_net"
        arrays.update({f"param/{k}": v for k, v in model.params.items()})
    else:
        meta["kind"] = "tabular_dual_value"
        meta["tabular"] = {"n_cells": model.n_cells, "n_time_bins": model.n_time_bins,
                           "time_bin_s": None if math.isinf(model.time_bin_s) else model.time_bin_s}
        arrays.update({"param/V": model.V, "param/Vb": model.Vb})
    if trainer is not None:
        meta["trainer"] = {"step": trainer.step, "rng": trainer.rng.bit_generator.state,
                           "history": trainer.history, "tabular_lr": trainer.tabular_lr}
        if isinstance(model, DualValueNet):
            arrays.update({f"target/{k}": v for k, v in trainer.target.items()})
            arrays.update(trainer.adam.state_arrays())
            meta["trainer"]["adam_t"] = trainer.adam.t
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=np.array(json.dumps(meta)), **arrays)


def load_checkpoint(path: str | Path):
    """Return ``(model, trainer or None, extra)``."""
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(str(z["__meta__"]))
        arrays = {k: z[k] for k in z.files if k != "__meta__"}
    if meta.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {meta.get('version')}")
    cfg = ValueConfig.from_dict(meta["config"])
    if meta["kind"] == "dual_value_net":
        model = DualValueNet(cfg)
        for k in model.params:
            model.params[k][...] = arrays[f"param/{k}"]
    elif meta["kind"] == "tabular_dual_value":
        tb = meta["tabular"]
        model = TabularDualValue(tb["n_cells"], cfg, tb["n_time_bins"],
                                 math.inf if tb["time_bin_s"] is None else tb["time_bin_s"])
        model.V[...] = arrays["param/V"]
        model.Vb[...] = arrays["param/Vb"]
    else:
        raise ValueError(f"unknown checkpoint kind {meta['kind']!r}")
    trainer = None
    if "trainer" in meta:
        tm = meta["trainer"]
        trainer = DPETrainer(model, cfg, tabular_lr=tm.get("tabular_lr", 1.0))
        trainer.step = tm["step"]
        trainer.rng.bit_generator.state = tm["rng"]
        trainer.history = [tuple(h) for h in tm["history"]]
        if isinstance(model, DualValueNet):
            for k in trainer.target:
                trainer.target[k][...] = arrays[f"target/{k}"]
            trainer.adam.load_state_arrays(arrays, tm["adam_t"])
    return model, trainer, meta.get("extra", {})
