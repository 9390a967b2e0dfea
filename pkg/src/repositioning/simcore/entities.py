from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Literal, Optional

LatLon = tuple[float, float]

IDLE = "idle"
SERVING = "serving"
REPOSITIONING = "repositioning"
OFFLINE = "offline"
STATUSES = (IDLE, REPOSITIONING, SERVING, OFFLINE)

# Option index convention shared with the Q-network: 0 = stay, 1..6 = axial direction + 1.
N_OPTIONS = 7


@dataclass(frozen=True)
class SDContext:
    """Supply-demand counts for the current cell and its six neighbours.

    Each slot is ``(idle drivers, requests, unassigned requests)``; slot 0 is
    the current cell and slot ``d + 1`` the neighbour in axial direction ``d``.
    Missing neighbours are zero-filled.
    """

    slots: tuple[tuple[float, float, float], ...]

    def __post_init__(self):
        if len(self.slots) != N_OPTIONS:
            raise ValueError(f"SD context needs {N_OPTIONS} slots, got {len(self.slots)}")
        for s in self.slots:
            if len(s) != 3 or min(s) < 0:
                raise ValueError(f"bad SD slot {s}")

    def gaps(self) -> tuple[float, ...]:
        """Demand minus supply per slot (unassigned requests - idle drivers)."""
        return tuple(s[2] - s[0] for s in self.slots)


@dataclass(frozen=True)
class DriverState:
    location: LatLon
    cell: int
    time: float  # seconds since episode start
    sd_context: Optional[SDContext] = None


@dataclass(frozen=True)
class OptionRecord:
    kind: Literal["reposition", "dispatch"]
    destination: int  # cell id for repositions, trip id for dispatches
    duration_min: float
    price: Optional[float] = None
    cost: Optional[float] = None
    direction: Optional[int] = None  # option index 0..6 when the target is stay/neighbour

    def __post_init__(self):
        if self.kind == "dispatch":
            if self.price is None or self.cost is not None or self.price <= 0:
                raise ValueError("dispatch options carry a positive price and no cost")
        elif self.kind == "reposition":
            if self.cost is None or self.price is not None or self.cost < 0:
                raise ValueError("reposition options carry a non-negative cost and no price")
        else:
            raise ValueError(f"unknown option kind {self.kind!r}")

    @property
    def reward(self) -> float:
        return self.price if self.kind == "dispatch" else -self.cost

    @property
    def is_dispatch(self) -> bool:
        return self.kind == "dispatch"


@dataclass(frozen=True)
class TripOrder:
    id: int
    request_time: float
    origin: LatLon
    destination: LatLon
    price: float
    trip_duration: float  # minutes

    def __post_init__(self):
        if not self.price > 0:
            raise ValueError(f"order {self.id}: price must be positive")
        if not self.trip_duration > 0:
            raise ValueError(f"order {self.id}: trip duration must be positive")


@dataclass(frozen=True)
class TransitionRecord:
    s: DriverState
    option: OptionRecord
    reward: float
    k: int  # duration in discrete steps
    s_next: DriverState
    terminal: bool = False
    driver_id: int = -1
    managed: bool = False
    next_option: Optional[int] = None  # option index taken at s_next (SARSA records)

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("transition duration must be at least one step")
        for v in (self.reward, self.s.time, self.s_next.time):
            if not math.isfinite(v):
                raise ValueError("non-finite value in transition record")


@dataclass
class DriverAgent:
    id: int
    managed: bool
    xy: tuple[float, float]
    cell: int
    status: str = IDLE
    status_since: float = 0.0
    idle_since: float = 0.0
    idle_streak_start: float = 0.0
    idle_start_logged: bool = False
    income: float = 0.0
    seconds: dict = field(default_factory=lambda: {s: 0.0 for s in STATUSES})
    option: object = None
    token: int = 0
    decision: object = None

    @property
    def online_seconds(self) -> float:
        return self.seconds[IDLE] + self.seconds[REPOSITIONING] + self.seconds[SERVING]

    def set_status(self, status: str, now: float) -> None:
        self.seconds[self.status] += now - self.status_since
        self.status = status
        self.status_since = now
