"""Dispatch probability p_d(s): probability an idle driver in state s receives a trip.

Positives are states where a driver received a trip; negatives are sampled
from idle-period starts and online/offline transitions.  The reference model
is L2-regularised logistic regression over one-hot cell, time-of-day and
day-of-week features plus a hashed 5-dim driver code, followed by isotonic
calibration on a held-out split.
"""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.stats import rankdata
from sklearn.isotonic import IsotonicRegression
from sklearn.linear_model import LogisticRegression

log = logging.getLogger(__name__)

POSITIVE_KINDS = ("dispatch",)
NEGATIVE_KINDS = ("idle_start", "online", "offline")


@dataclass(frozen=True)
class LabeledExample:
    cell: int
    time_s: float  # seconds since episode start
    day_of_week: int
    driver_id: int
    label: int

    def __post_init__(self):
        if self.label not in (0, 1):
            raise ValueError("labels must be 0 or 1")


@dataclass(frozen=True)
class FeatureSpec:
    n_cells: int
    start_hour: int = 0
    time_bin_min: int = 30
    driver_dim: int = 5
    cross_block_h: int = 0  # > 0 adds one-hot (cell, block of hours) interactions

    @property
    def n_blocks(self) -> int:
        return 24 // self.cross_block_h if self.cross_block_h > 0 else 0

    @property
    def n_time_bins(self) -> int:
        return 24 * 60 // self.time_bin_min

    @property
    def width(self) -> int:
        return self.n_cells + self.n_time_bins + 7 + self.n_cells * self.n_blocks + self.driver_dim

    def driver_code(self, driver_ids: np.ndarray) -> np.ndarray:
        """Deterministic hash of each driver id into ``[-1, 1]^driver_dim``; unknown (-1) maps to 0."""
        out = np.zeros((len(driver_ids), self.driver_dim))
        for i, d in enumerate(np.asarray(driver_ids).tolist()):
            if d < 0:
                continue
            digest = hashlib.blake2b(str(int(d)).encode(), digest_size=2 * self.driver_dim).digest()
            raw = np.frombuffer(digest, dtype=np.uint16).astype(float)
            out[i] = raw / 32767.5 - 1.0
        return out

    def encode(self, cells, time_s, day_of_week, driver_ids) -> sp.csr_matrix:
        cells = np.asarray(cells, dtype=np.int64).reshape(-1)
        n = len(cells)
        if ((cells < 0) | (cells >= self.n_cells)).any():
            raise ValueError("cell id outside the feature spec")
        tod = (np.asarray(time_s, dtype=float).reshape(-1) + self.start_hour * 3600.0) % 86400.0
        tbin = np.minimum((tod // (self.time_bin_min * 60)).astype(np.int64), self.n_time_bins - 1)
        dow = np.broadcast_to(np.asarray(day_of_week, dtype=np.int64), (n,)) % 7
        drv = np.broadcast_to(np.asarray(driver_ids, dtype=np.int64), (n,))
        base = self.n_cells + self.n_time_bins + 7
        cols = [cells, self.n_cells + tbin, self.n_cells + self.n_time_bins + dow]
        if self.n_blocks:
            block = (tod // (self.cross_block_h * 3600)).astype(np.int64)
            cols.append(base + cells * self.n_blocks + block)
        k = len(cols)
        rows = np.repeat(np.arange(n), k)
        onehot = sp.csr_matrix((np.ones(k * n), (rows, np.stack(cols, axis=1).ravel())), shape=(n, self.width))
        dense = np.zeros((n, self.width))
        dense[:, self.width - self.driver_dim:] = self.driver_code(drv)
        return (onehot + sp.csr_matrix(dense)).tocsr()

    def encode_examples(self, examples: Sequence[LabeledExample]) -> tuple[sp.csr_matrix, np.ndarray]:
        X = self.encode([e.cell for e in examples], [e.time_s for e in examples],
                        [e.day_of_week for e in examples], [e.driver_id for e in examples])
        return X, np.array([e.label for e in examples], dtype=np.int64)


def build_training_set(events: Iterable, day_of_week: int = 0) -> tuple[list[LabeledExample], dict[str, int]]:
    """Label trajectory events: dispatch receipts are positives; idle starts and
    online/offline transitions are negatives.  Other event kinds are ignored."""
    examples, counts = [], {k: 0 for k in POSITIVE_KINDS + NEGATIVE_KINDS}
    for ev in events:
        if ev.kind in POSITIVE_KINDS:
            label = 1
        elif ev.kind in NEGATIVE_KINDS:
            label = 0
        else:
            continue
        counts[ev.kind] += 1
        examples.append(LabeledExample(int(ev.cell), float(ev.time), day_of_week, int(ev.driver_id), label))
    if not examples:
        log.warning("no labelled states in the supplied trajectories")
    counts["positives"] = sum(counts[k] for k in POSITIVE_KINDS)
    counts["negatives"] = sum(counts[k] for k in NEGATIVE_KINDS)
    return examples, counts


@dataclass
class DispatchClassifier:
    spec: FeatureSpec
    coef: np.ndarray
    intercept: float
    knots_x: Optional[np.ndarray] = None
    knots_y: Optional[np.ndarray] = None
    info: dict = field(default_factory=dict)

    def score(self, X) -> np.ndarray:
        """Uncalibrated probability; ranks identically to ``predict`` up to calibration ties."""
        z = np.asarray(X @ self.coef).reshape(-1) + self.intercept
        return 1.0 / (1.0 + np.exp(-z))

    def predict_proba(self, X) -> np.ndarray:
        p = self.score(X)
        if self.knots_x is not None and len(self.knots_x) > 1:
            p = np.interp(p, self.knots_x, self.knots_y)
        return np.clip(p, 0.0, 1.0)

    def predict(self, cells, time_s, day_of_week=0, driver_ids=-1) -> np.ndarray:
        return self.predict_proba(self.spec.encode(cells, time_s, day_of_week, driver_ids))

    def p_idle(self, cells, time_s, day_of_week=0, driver_ids=-1) -> np.ndarray:
        return 1.0 - self.predict(cells, time_s, day_of_week, driver_ids)

    def to_dict(self) -> dict:
        return {
            "spec": asdict(self.spec), "coef": self.coef.tolist(), "intercept": self.intercept,
            "calibration": None if self.knots_x is None else {"x": self.knots_x.tolist(), "y": self.knots_y.tolist()},
            "info": self.info,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DispatchClassifier":
        cal = d.get("calibration")
        return cls(FeatureSpec(**d["spec"]), np.asarray(d["coef"], dtype=float), float(d["intercept"]),
                   None if cal is None else np.asarray(cal["x"], dtype=float),
                   None if cal is None else np.asarray(cal["y"], dtype=float), d.get("info", {}))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path: str | Path) -> "DispatchClassifier":
        return cls.from_dict(json.loads(Path(path).read_text()))


class ConstantDispatch:
    """Fixed dispatch probability everywhere (useful for ablations and toys)."""

    def __init__(self, p: float):
        if not 0.0 <= p <= 1.0:
            raise ValueError("probability must lie in [0, 1]")
        self.p = p

    def predict(self, cells, time_s, day_of_week=0, driver_ids=-1) -> np.ndarray:
        return np.full(np.asarray(cells).reshape(-1).shape, self.p)


def train(examples: Sequence[LabeledExample], spec: FeatureSpec, seed: int = 0, C: float = 1.0,
          max_neg_ratio: float = 5.0, calibrate: bool = True, val_fraction: float = 0.2) -> DispatchClassifier:
    X, y = spec.encode_examples(examples)
    if len(np.unique(y)) < 2:
        raise ValueError("training data must contain both positive and negative examples")
    rng = np.random.default_rng(seed)
    pos = np.flatnonzero(y == 1)
    neg = np.flatnonzero(y == 0)
    keep_neg = neg
    if len(neg) > max_neg_ratio * len(pos):
        keep_neg = np.sort(rng.choice(neg, size=int(max_neg_ratio * len(pos)), replace=False))
    neg_weight = len(neg) / len(keep_neg)
    idx = np.sort(np.concatenate([pos, keep_neg]))
    w = np.where(y[idx] == 1, 1.0, neg_weight)
    perm = rng.permutation(len(idx))
    n_val = int(round(val_fraction * len(idx))) if calibrate else 0
    if n_val < 20 or len(np.unique(y[idx[perm[n_val:]]])) < 2:
        n_val = 0
    val, fit = idx[perm[:n_val]], idx[perm[n_val:]]
    w_val, w_fit = w[perm[:n_val]], w[perm[n_val:]]
    lr = LogisticRegression(C=C, solver="lbfgs", tol=1e-6, max_iter=2000)
    lr.fit(X[fit], y[fit], sample_weight=w_fit)
    clf = DispatchClassifier(spec, lr.coef_[0].astype(float), float(lr.intercept_[0]),
                             info={"n_pos": int(len(pos)), "n_neg": int(len(neg)), "n_neg_kept": int(len(keep_neg)),
                                   "n_iter": int(lr.n_iter_[0]), "seed": seed, "C": C})
    if n_val:
        iso = IsotonicRegression(y_min=0.0, y_max=1.0, out_of_bounds="clip")
        iso.fit(clf.score(X[val]), y[val], sample_weight=w_val)
        clf.knots_x = np.asarray(iso.X_thresholds_, dtype=float)
        clf.knots_y = np.asarray(iso.y_thresholds_, dtype=float)
    return clf


def auc_rank(scores, labels) -> float:
    """Mann-Whitney AUC with average ranks for ties."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels).astype(bool)
    n1, n0 = labels.sum(), (~labels).sum()
    if n1 == 0 or n0 == 0:
        raise ValueError("AUC needs both classes")
    ranks = rankdata(scores)
    return float((ranks[labels].sum() - n1 * (n1 + 1) / 2.0) / (n1 * n0))


def auc_trapezoid(scores, labels) -> float:
    """Area under the ROC polyline over distinct thresholds."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels).astype(bool)
    order = np.argsort(-scores, kind="mergesort")
    s, l = scores[order], labels[order]
    last = np.r_[np.flatnonzero(np.diff(s) != 0), len(s) - 1]
    tp = np.r_[0, np.cumsum(l)[last]]
    fp = np.r_[0, np.cumsum(~l)[last]]
    return float(np.trapezoid(tp / tp[-1], fp / fp[-1]))


def evaluate(clf: DispatchClassifier, examples: Sequence[LabeledExample], threshold: float = 0.5) -> dict:
    X, y = clf.spec.encode_examples(examples)
    p = clf.predict_proba(X)
    pred = p >= threshold
    tp = int(np.sum(pred & (y == 1)))
    fp = int(np.sum(pred & (y == 0)))
    fn = int(np.sum(~pred & (y == 1)))
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return {
        "recall": recall, "precision": precision, "f1": f1,
        "accuracy": float(np.mean(pred == (y == 1))),
        "auc": auc_rank(clf.score(X), y), "n": int(len(y)),
    }
