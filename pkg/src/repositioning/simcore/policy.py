"""Contract between the simulator and reposition policies."""
from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING, Optional, Sequence, Union

import numpy as np

from .entities import DriverState, LatLon

if TYPE_CHECKING:
    from .engine import SimView


class PolicyError(RuntimeError):
    pass


@dataclass(frozen=True)
class ReviewRequest:
    driver_id: int
    state: DriverState
    idle_minutes: float  # continuous idle time since the last drop-off or going online


@dataclass(frozen=True)
class Destination:
    cell: int
    point: Optional[LatLon] = None  # defaults to the cell's representative pick-up point


Decision = Union[int, Destination]


class RepositionPolicy:
    """Base class: answer every reposition review with a destination cell.

    ``observe`` receives the discounted net income earned between a decision
    and the driver's next decision (used by learning baselines).
    """

    name = "policy"
    needs_sd_context = False

    def begin_episode(self, view: "SimView") -> None:
        pass

    def decide(self, request: ReviewRequest, view: "SimView", rng: np.random.Generator) -> Decision:
        raise NotImplementedError

    def decide_batch(self, requests: Sequence[ReviewRequest], view: "SimView",
                     rng: np.random.Generator) -> list[Decision]:
        return [self.decide(r, view, rng) for r in requests]

    def observe(self, driver_id: int, origin_cell: int, option_index: Optional[int], ret: float) -> None:
        pass


class StayPolicy(RepositionPolicy):
    name = "stay"

    def decide(self, request, view, rng):
        return request.state.cell
