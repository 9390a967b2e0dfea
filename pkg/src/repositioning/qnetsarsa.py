"""Shared action-value network with supply-demand attention, trained by deep SARSA.

The network scores the 7 reposition options (stay + 6 neighbours).  Its input
is the tile-coded state embedding plus the supply-demand (SD) context of the
current cell and its neighbours.  Attention weights are a softmax over the
bilinear scores ``sd_0^T W sd_i``, and the attended context joins the state
features before the output layer.  At decision time the option values may be
shifted by the SD gap and are turned into a Boltzmann distribution.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .hexgrid import HexGrid
from .nn import MLP, Adam, he_init, softmax, sparse_rows
from .simcore.entities import N_OPTIONS, SDContext, TransitionRecord
from .simcore.policy import RepositionPolicy
from .valuenet import CerebellarEmbedding, discounted_reward

log = logging.getLogger(__name__)

SD_DIM = 3


def attention_weights(sd0: np.ndarray, sd_nb: np.ndarray, W: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """``alpha_i = softmax_i(sd0^T W sd_i)`` and the context ``sum_i alpha_i sd_i``.

    Accepts a single state (``sd0`` of shape ``(d,)``, ``sd_nb`` of shape
    ``(k, d)``) or a batch (leading batch axis on both).
    """
    sd0 = np.asarray(sd0, dtype=float)
    sd_nb = np.asarray(sd_nb, dtype=float)
    W = np.asarray(W, dtype=float)
    if W.shape != (sd0.shape[-1], sd_nb.shape[-1]):
        raise ValueError(f"attention matrix {W.shape} incompatible with features {sd0.shape[-1]}x{sd_nb.shape[-1]}")
    logits = np.einsum("...d,de,...ke->...k", sd0, W, sd_nb)
    alpha = softmax(logits, axis=-1)
    return alpha, np.einsum("...k,...kd->...d", alpha, sd_nb)


def boltzmann_policy(q, rng: np.random.Generator, mask=None, temperature: float = 1.0) -> tuple[int, np.ndarray]:
    """Sample an option from ``softmax(q / T)`` over unmasked entries."""
    q = np.asarray(q, dtype=float)
    if mask is not None and not np.any(mask):
        raise ValueError("every destination is masked")
    probs = softmax(q / temperature, mask=mask)
    return int(rng.choice(len(q), p=probs)), probs


@dataclass(frozen=True)
class SDRegConfig:
    alpha: float = 0.2
    beta: float = 17.0

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")


def sd_regularize(q, gaps, config: SDRegConfig) -> np.ndarray:
    """``q'_k = q_k + alpha g_k`` where ``g_k > beta``; other entries are left bit-identical."""
    q = np.asarray(q, dtype=float)
    g = np.asarray(gaps, dtype=float)
    return np.where(g > config.beta, q + config.alpha * g, q)


def sd_features(ctx: SDContext | None) -> np.ndarray:
    """``(7, 3)`` log-scaled SD counts; a missing context reads as all zeros."""
    if ctx is None:
        return np.zeros((N_OPTIONS, SD_DIM))
    return np.log1p(np.asarray(ctx.slots, dtype=float))


@dataclass
class QConfig:
    gamma: float = 0.92
    lr: float = 3e-4
    reg: float = 1e-4
    iterations: int = 20000
    batch_size: int = 256
    target_sync: int = 1000
    n_quantizers: int = 3
    memory_size: int = 20000
    embed_dim: int = 50
    hidden: tuple = (32,)
    time_bin_min: float = 10.0
    spatial_edge_m: float = 800.0
    seed: int = 0
    log_every: int = 100

    def __post_init__(self):
        if not 0 < self.gamma < 1:
            raise ValueError("gamma must lie in (0, 1)")
        self.hidden = tuple(int(h) for h in self.hidden)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d


class QNet:
    def __init__(self, config: QConfig | None = None):
        self.config = cfg = config or QConfig()
        rng = np.random.default_rng(cfg.seed)
        self.embedding = CerebellarEmbedding(cfg.n_quantizers, cfg.memory_size, cfg.embed_dim,
                                             cfg.spatial_edge_m, cfg.time_bin_min, rng)
        self.trunk = MLP([cfg.embed_dim, *cfg.hidden], rng, "trunk/")
        width = cfg.hidden[-1] + 2 * SD_DIM
        self.params: dict[str, np.ndarray] = {"theta": self.embedding.theta}
        self.params.update(self.trunk.params)
        self.params["att/W"] = rng.normal(0.0, 0.1, size=(SD_DIM, SD_DIM))
        self.params["out/W"] = he_init(rng, width, N_OPTIONS) * 0.5
        self.params["out/b"] = np.zeros(N_OPTIONS)
        self.trunk.params = self.params
        self.embedding.theta = self.params["theta"]

    def reg_names(self) -> list[str]:
        return self.trunk.weight_names() + ["att/W", "out/W"]

    def forward(self, idx: np.ndarray, sd: np.ndarray, params=None):
        """``idx``: ``(B, n)`` memory rows; ``sd``: ``(B, 7, 3)`` SD features."""
        p = self.params if params is None else params
        e = self.embedding.embed(idx, p["theta"])
        h, cache = self.trunk.forward(e, p)
        sd0, nb = sd[:, 0, :], sd[:, 1:, :]
        alpha, ctx = attention_weights(sd0, nb, p["att/W"])
        z = np.concatenate([h, sd0, ctx], axis=1)
        q = z @ p["out/W"] + p["out/b"]
        return q, (h, cache, sd0, nb, alpha, z)

    def q_values(self, xy, t_s, sd) -> np.ndarray:
        idx = self.embedding.indices(xy, t_s)
        return self.forward(idx, np.asarray(sd, dtype=float).reshape(len(idx), N_OPTIONS, SD_DIM))[0]

    def loss_and_grads(self, idx, sd, options, y):
        p, reg = self.params, self.config.reg
        q, (h, cache, sd0, nb, alpha, z) = self.forward(idx, sd)
        B = len(idx)
        rows = np.arange(B)
        resid = q[rows, options] - y
        loss = 0.5 * float(np.mean(resid ** 2))
        dq = np.zeros_like(q)
        dq[rows, options] = resid / B
        grads: dict[str, object] = {"out/W": z.T @ dq, "out/b": dq.sum(axis=0)}
        dz = dq @ p["out/W"].T
        H = h.shape[1]
        dh = dz[:, :H]
        dctx = dz[:, H + SD_DIM:]
        dalpha = np.einsum("bd,bkd->bk", dctx, nb)
        dlogit = alpha * (dalpha - np.sum(alpha * dalpha, axis=1, keepdims=True))
        grads["att/W"] = np.einsum("bk,bd,bke->de", dlogit, sd0, nb)
        de = self.trunk.backward(dh, cache, grads)
        n = self.embedding.n
        grads["theta"] = sparse_rows(idx.ravel(), np.repeat(de / n, n, axis=0))
        for name in self.reg_names():
            loss += 0.5 * reg * float(np.sum(p[name] ** 2))
            grads[name] = grads[name] + reg * p[name]
        return loss, grads


# -- SARSA data -------------------------------------------------------------------

@dataclass
class SarsaData:
    xy: np.ndarray
    t: np.ndarray
    cells: np.ndarray
    sd: np.ndarray
    option: np.ndarray
    reward: np.ndarray
    k: np.ndarray
    xy_next: np.ndarray
    t_next: np.ndarray
    cells_next: np.ndarray
    sd_next: np.ndarray
    option_next: np.ndarray
    terminal: np.ndarray
    skipped: int = 0

    def __len__(self) -> int:
        return len(self.reward)

    @classmethod
    def from_records(cls, records: Iterable[TransitionRecord], grid: HexGrid | None = None) -> "SarsaData":
        good, skipped = [], 0
        for r in records:
            o = r.option.direction
            if o is None:
                skipped += 1
                continue
            if not r.terminal and r.next_option is None:
                skipped += 1
                log.warning("skipping non-terminal SARSA record without next option (driver %s, t=%.0f)",
                            r.driver_id, r.s.time)
                continue
            good.append(r)

        def xy_of(states):
            if grid is None:
                return np.zeros((len(states), 2))
            return np.array([grid.to_xy(*s.location) for s in states], dtype=float).reshape(-1, 2)

        s, sn = [r.s for r in good], [r.s_next for r in good]
        return cls(
            xy=xy_of(s), t=np.array([x.time for x in s], dtype=float),
            cells=np.array([x.cell for x in s], dtype=np.int64),
            sd=np.array([sd_features(x.sd_context) for x in s]).reshape(-1, N_OPTIONS, SD_DIM),
            option=np.array([r.option.direction for r in good], dtype=np.int64),
            reward=np.array([r.reward for r in good], dtype=float),
            k=np.array([r.k for r in good], dtype=np.int64),
            xy_next=xy_of(sn), t_next=np.array([x.time for x in sn], dtype=float),
            cells_next=np.array([x.cell for x in sn], dtype=np.int64),
            sd_next=np.array([sd_features(x.sd_context) for x in sn]).reshape(-1, N_OPTIONS, SD_DIM),
            option_next=np.array([-1 if r.next_option is None else r.next_option for r in good], dtype=np.int64),
            terminal=np.array([r.terminal for r in good], dtype=bool),
            skipped=skipped,
        )

    def subset(self, idx) -> "SarsaData":
        names = ("xy", "t", "cells", "sd", "option", "reward", "k", "xy_next", "t_next", "cells_next",
                 "sd_next", "option_next", "terminal")
        return SarsaData(*(getattr(self, n)[idx] for n in names))


def sarsa_targets(data: SarsaData, gamma: float, q_next: np.ndarray) -> np.ndarray:
    """``discounted_reward(r, k) + gamma^k Q(s', o')``; terminal records keep the reward part only."""
    base = discounted_reward(data.reward, data.k, gamma)
    return base + np.where(data.terminal, 0.0, np.power(gamma, data.k) * q_next)


class TabularQ:
    """Q table keyed by cell, for exact small experiments."""

    def __init__(self, n_cells: int, gamma: float = 0.92):
        self.Q = np.zeros((n_cells, N_OPTIONS))
        self.config = QConfig(gamma=gamma)

    def q_values_cells(self, cells) -> np.ndarray:
        return self.Q[np.asarray(cells, dtype=np.int64)]


class SarsaTrainer:
    def __init__(self, model: QNet | TabularQ, config: QConfig | None = None, tabular_lr: float = 1.0):
        self.model = model
        self.config = config or model.config
        self.rng = np.random.default_rng(self.config.seed + 1)
        self.step = 0
        self.history: list[tuple[int, float]] = []
        self.tabular_lr = tabular_lr
        if isinstance(model, QNet):
            self.target = {k: v.copy() for k, v in model.params.items()}
            self.adam = Adam(model.params, lr=self.config.lr)

    def update(self, batch: SarsaData) -> float:
        m, g = self.model, self.config.gamma
        alive = ~batch.terminal
        if isinstance(m, TabularQ):
            q_next = np.where(alive, m.Q[batch.cells_next, np.maximum(batch.option_next, 0)], 0.0)
            y = sarsa_targets(batch, g, q_next)
            keys = batch.cells * N_OPTIONS + batch.option
            size = m.Q.size
            cnt = np.bincount(keys, minlength=size)
            seen = cnt > 0
            flat = m.Q.reshape(-1)
            loss = 0.5 * float(np.mean((flat[keys] - y) ** 2))
            mean = np.bincount(keys, weights=y, minlength=size)[seen] / cnt[seen]
            flat[seen] += self.tabular_lr * (mean - flat[seen])
            self.step += 1
            return loss
        q_next = np.zeros(len(batch))
        if alive.any():
            idx_n = m.embedding.indices(batch.xy_next[alive], batch.t_next[alive])
            qn, _ = m.forward(idx_n, batch.sd_next[alive], self.target)
            q_next[alive] = qn[np.arange(int(alive.sum())), batch.option_next[alive]]
        y = sarsa_targets(batch, g, q_next)
        idx = m.embedding.indices(batch.xy, batch.t)
        loss, grads = m.loss_and_grads(idx, batch.sd, batch.option, y)
        self.adam.step(grads)
        self.step += 1
        if self.step % self.config.target_sync == 0:
            for k, v in m.params.items():
                self.target[k][...] = v
        return loss

    def train(self, data: SarsaData, iterations: int | None = None, full_batch: bool = False):
        if len(data) == 0:
            raise ValueError("no usable SARSA records")
        n_iter = self.config.iterations if iterations is None else iterations
        for _ in range(n_iter):
            batch = data if full_batch else data.subset(
                self.rng.integers(0, len(data), size=min(self.config.batch_size, len(data))))
            loss = self.update(batch)
            if self.step % self.config.log_every == 0 or self.step == 1:
                self.history.append((self.step, loss))
        return self.history


def sarsa_update_batch(trainer: SarsaTrainer, records: Sequence[TransitionRecord],
                       grid: HexGrid | None = None) -> float:
    data = SarsaData.from_records(records, grid)
    return trainer.update(data) if len(data) else 0.0


# -- decision time ----------------------------------------------------------------

def option_cells(grid: HexGrid, cell: int) -> tuple[np.ndarray, np.ndarray]:
    """Destination cell per option index and the validity mask."""
    dest = np.array([cell] + [int(n) for n in grid.adjacency[cell]], dtype=np.int64)
    mask = np.array([bool(grid.valid_mask[cell])] + [n >= 0 and bool(grid.valid_mask[n]) for n in dest[1:]])
    return dest, mask


def act(q: np.ndarray, mask: np.ndarray, gaps, rng: np.random.Generator,
        sd_reg: SDRegConfig | None = None, temperature: float = 1.0) -> tuple[int, np.ndarray]:
    """Boltzmann sample over masked, optionally SD-regularised option values."""
    if sd_reg is not None:
        q = sd_regularize(q, gaps, sd_reg)
    return boltzmann_policy(q, rng, mask, temperature)


class SarsaPolicy(RepositionPolicy):
    needs_sd_context = True

    def __init__(self, net: QNet, sd_reg: SDRegConfig | None = None, stochastic: bool = True,
                 temperature: float = 1.0):
        self.net = net
        self.sd_reg = sd_reg
        self.stochastic = stochastic
        self.temperature = temperature
        self.name = "sarsa" + ("-sdreg" if sd_reg is not None else "")

    def decide_batch(self, requests, view, rng):
        grid = view.grid
        xy = np.array([grid.to_xy(*r.state.location) for r in requests], dtype=float)
        t = np.array([r.state.time for r in requests], dtype=float)
        sd = np.array([sd_features(r.state.sd_context) for r in requests])
        q_all = self.net.q_values(xy, t, sd)
        out = []
        for req, q in zip(requests, q_all):
            dest, mask = option_cells(grid, req.state.cell)
            if not mask.any():
                _ring, far = grid.nearest_valid(req.state.cell)
                out.append(int(far[0]))
                continue
            gaps = np.array(req.state.sd_context.gaps()) if req.state.sd_context is not None else np.zeros(N_OPTIONS)
            if self.stochastic:
                k, _ = act(q, mask, gaps, rng, self.sd_reg, self.temperature)
            else:
                qq = sd_regularize(q, gaps, self.sd_reg) if self.sd_reg is not None else q
                qq = np.where(mask, qq, -np.inf)
                k = int(np.flatnonzero(qq == qq.max())[0])
            out.append(int(dest[k]))
        return out


# -- SD snapshot stream -------------------------------------------------------------

def write_sd_snapshots(path: str | Path, snapshots: Iterable[tuple[float, np.ndarray]]) -> None:
    """JSON lines ``{ts, cell, idle_count, request_count, unassigned_count}``; zero rows omitted."""
    with open(path, "w") as fh:
        for ts, counts in snapshots:
            for cell in np.flatnonzero(np.asarray(counts).sum(axis=1) > 0).tolist():
                idle, req, un = (float(x) for x in counts[cell])
                fh.write(json.dumps({"ts": float(ts), "cell": cell, "idle_count": idle,
                                     "request_count": req, "unassigned_count": un}) + "\n")


def load_sd_snapshots(path: str | Path, n_cells: int) -> list[tuple[float, np.ndarray]]:
    from .simcore.behavior import DataError
    by_ts: dict[float, np.ndarray] = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
                counts = by_ts.setdefault(float(row["ts"]), np.zeros((n_cells, SD_DIM)))
                counts[int(row["cell"])] = (row["idle_count"], row["request_count"], row["unassigned_count"])
            except (ValueError, KeyError, IndexError, TypeError) as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
    return sorted(by_ts.items())


def sd_context_from_counts(grid: HexGrid, counts: np.ndarray, cell: int) -> SDContext:
    slots = [tuple(float(x) for x in counts[cell])]
    for n in grid.adjacency[cell].tolist():
        slots.append(tuple(float(x) for x in counts[n]) if n >= 0 else (0.0, 0.0, 0.0))
    return SDContext(tuple(slots))


# -- checkpoints ----------------------------------------------------------------

def save_qnet(path: str | Path, net: QNet, trainer: SarsaTrainer | None = None, extra: dict | None = None) -> None:
    meta: dict = {"kind": "qnet", "config": net.config.to_dict(), "extra": extra or {}}
    arrays = {f"param/{k}": v for k, v in net.params.items()}
    if trainer is not None:
        meta["trainer"] = {"step": trainer.step, "rng": trainer.rng.bit_generator.state,
                           "history": trainer.history, "adam_t": trainer.adam.t}
        arrays.update({f"target/{k}": v for k, v in trainer.target.items()})
        arrays.update(trainer.adam.state_arrays())
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=np.array(json.dumps(meta)), **arrays)


def load_qnet(path: str | Path) -> tuple[QNet, Optional[SarsaTrainer], dict]:
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(str(z["__meta__"]))
        arrays = {k: z[k] for k in z.files if k != "__meta__"}
    if meta.get("kind") != "qnet":
        raise ValueError(f"{path} is not a Q-network checkpoint")
    cfg_d = dict(meta["config"])
    cfg_d["hidden"] = tuple(cfg_d["hidden"])
    net = QNet(QConfig(**cfg_d))
    for k in net.params:
        net.params[k][...] = arrays[f"param/{k}"]
    trainer = None
    if "trainer" in meta:
        tm = meta["trainer"]
        trainer = SarsaTrainer(net)
        trainer.step = tm["step"]
        trainer.rng.bit_generator.state = tm["rng"]
        trainer.history = [tuple(h) for h in tm["history"]]
        for k in trainer.target:
            trainer.target[k][...] = arrays[f"target/{k}"]
        trainer.adam.load_state_arrays(arrays, tm["adam_t"])
    return net, trainer, meta.get("extra", {})
