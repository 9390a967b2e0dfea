"""Batch order-driver assignment."""
from __future__ import annotations

import numpy as np
from scipy.optimize import linear_sum_assignment

_INFEASIBLE = 1e12


def solve_assignment(cost: np.ndarray, feasible: np.ndarray | None = None) -> list[tuple[int, int]]:
    """Minimum-cost assignment on a rectangular matrix.

    Every row or column (whichever side is smaller) is matched unless its only
    options are infeasible edges, which are dropped from the result.
    """
    cost = np.asarray(cost, dtype=float)
    if cost.size == 0:
        return []
    if feasible is not None:
        cost = np.where(feasible, cost, _INFEASIBLE)
    rows, cols = linear_sum_assignment(cost)
    pairs = [(int(i), int(j)) for i, j in zip(rows, cols)]
    if feasible is not None:
        pairs = [(i, j) for i, j in pairs if feasible[i, j]]
    return pairs


def pickup_distances(driver_xy: np.ndarray, order_xy: np.ndarray) -> np.ndarray:
    driver_xy = np.asarray(driver_xy, dtype=float).reshape(-1, 2)
    order_xy = np.asarray(order_xy, dtype=float).reshape(-1, 2)
    diff = driver_xy[:, None, :] - order_xy[None, :, :]
    return np.hypot(diff[..., 0], diff[..., 1])


def match_batch(driver_xy: np.ndarray, order_xy: np.ndarray,
                max_pickup_m: float | None = None,
                feasible: np.ndarray | None = None) -> list[tuple[int, int]]:
    """Minimum-distance dispatch: pair idle drivers and open orders.

    Edge weights are pick-up distances; the total over the batch is minimal.
    Returns ``(driver_index, order_index)`` pairs.
    """
    dist = pickup_distances(driver_xy, order_xy)
    if dist.size == 0:
        return []
    mask = np.ones(dist.shape, dtype=bool) if feasible is None else np.asarray(feasible, dtype=bool).copy()
    if max_pickup_m is not None:
        mask &= dist <= max_pickup_m
    if not mask.any():
        return []
    return solve_assignment(dist, None if mask.all() else mask)
