"""Minimal numpy building blocks: dense layers, ReLU, softmax and Adam."""
from __future__ import annotations

from typing import Mapping

import numpy as np


def he_init(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out))


def softmax(z: np.ndarray, axis: int = -1, mask: np.ndarray | None = None) -> np.ndarray:
    """Max-subtracted softmax; masked-out entries get probability exactly 0."""
    z = np.asarray(z, dtype=float)
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), z.shape)
        if not mask.any(axis=axis).all():
            raise ValueError("softmax over an all-masked slice")
        z = np.where(mask, z, -np.inf)
    zmax = np.max(z, axis=axis, keepdims=True)
    if np.isposinf(zmax).any():
        # a +inf entry takes all the mass (ties split evenly)
        top = np.isposinf(z)
        return top / top.sum(axis=axis, keepdims=True)
    e = np.exp(z - zmax)
    return e / e.sum(axis=axis, keepdims=True)


class MLP:
    """Fully connected ReLU stack; the last layer is ReLU too unless ``linear_out``."""

    def __init__(self, sizes: list[int], rng: np.random.Generator, prefix: str, linear_out: bool = False):
        self.sizes = list(sizes)
        self.prefix = prefix
        self.linear_out = linear_out
        self.params: dict[str, np.ndarray] = {}
        for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
            self.params[f"{prefix}W{i}"] = he_init(rng, a, b)
            self.params[f"{prefix}b{i}"] = np.zeros(b)

    @property
    def n_layers(self) -> int:
        return len(self.sizes) - 1

    def weight_names(self) -> list[str]:
        return [f"{self.prefix}W{i}" for i in range(self.n_layers)]

    def forward(self, x: np.ndarray, params: Mapping[str, np.ndarray] | None = None):
        p = self.params if params is None else params
        cache = [x]
        h = x
        for i in range(self.n_layers):
            z = h @ p[f"{self.prefix}W{i}"] + p[f"{self.prefix}b{i}"]
            last = i == self.n_layers - 1
            h = z if (last and self.linear_out) else np.maximum(z, 0.0)
            cache.append(h)
        return h, cache

    def backward(self, dh: np.ndarray, cache, grads: dict) -> np.ndarray:
        p = self.params
        for i in reversed(range(self.n_layers)):
            out = cache[i + 1]
            last = i == self.n_layers - 1
            dz = dh if (last and self.linear_out) else dh * (out > 0)
            grads[f"{self.prefix}W{i}"] = cache[i].T @ dz
            grads[f"{self.prefix}b{i}"] = dz.sum(axis=0)
            dh = dz @ p[f"{self.prefix}W{i}"].T
        return dh


class Adam:
    """Adam with optional row-sparse updates.

    A gradient given as ``(rows, values)`` only touches those rows of the
    parameter (lazy moments), which keeps large embedding tables cheap.
    """

    def __init__(self, params: dict[str, np.ndarray], lr: float = 3e-4,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads: Mapping[str, object]) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        scale = self.lr * np.sqrt(1.0 - b2 ** self.t) / (1.0 - b1 ** self.t)
        for name, g in grads.items():
            p, m, v = self.params[name], self.m[name], self.v[name]
            if isinstance(g, tuple):
                rows, vals = g
                m[rows] = b1 * m[rows] + (1 - b1) * vals
                v[rows] = b2 * v[rows] + (1 - b2) * vals * vals
                p[rows] -= scale * m[rows] / (np.sqrt(v[rows]) + self.eps)
            else:
                m *= b1
                m += (1 - b1) * g
                v *= b2
                v += (1 - b2) * g * g
                p -= scale * m / (np.sqrt(v) + self.eps)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {f"adam_m/{k}": v for k, v in self.m.items()}
        out.update({f"adam_v/{k}": v for k, v in self.v.items()})
        return out

    def load_state_arrays(self, arrays: Mapping[str, np.ndarray], t: int) -> None:
        self.t = int(t)
        for k in self.m:
            self.m[k][...] = arrays[f"adam_m/{k}"]
            self.v[k][...] = arrays[f"adam_v/{k}"]


def sparse_rows(rows: np.ndarray, values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Sum duplicate-row gradient contributions; returns unique rows and summed values."""
    uniq, inv = np.unique(rows, return_inverse=True)
    out = np.zeros((len(uniq), values.shape[1]))
    np.add.at(out, inv, values)
    return uniq, out
