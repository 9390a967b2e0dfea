"""JSON-lines persistence for transition records, trajectory events and driver metrics.

Readers validate every line and raise :class:`DataError` naming the file and
line number of the first malformed record.
"""
from __future__ import annotations

import json
from dataclasses import asdict
from pathlib import Path
from typing import Callable, Iterable, Iterator, TypeVar

from .evalmetrics import DriverRecord
from .simcore.behavior import DataError
from .simcore.engine import TrajectoryEvent
from .simcore.entities import DriverState, OptionRecord, SDContext, TransitionRecord

T = TypeVar("T")


def state_to_dict(s: DriverState) -> dict:
    d = {"location": list(s.location), "cell": s.cell, "time": s.time}
    if s.sd_context is not None:
        d["sd"] = [list(slot) for slot in s.sd_context.slots]
    return d


def state_from_dict(d: dict) -> DriverState:
    sd = d.get("sd")
    ctx = None if sd is None else SDContext(tuple(tuple(float(x) for x in slot) for slot in sd))
    loc = d["location"]
    if len(loc) != 2:
        raise ValueError("location needs two coordinates")
    return DriverState((float(loc[0]), float(loc[1])), int(d["cell"]), float(d["time"]), ctx)


def transition_to_dict(t: TransitionRecord) -> dict:
    o = t.option
    return {
        "s": state_to_dict(t.s), "s_next": state_to_dict(t.s_next),
        "option": {"kind": o.kind, "destination": o.destination, "duration_min": o.duration_min,
                   "price": o.price, "cost": o.cost, "direction": o.direction},
        "reward": t.reward, "k": t.k, "terminal": t.terminal, "driver_id": t.driver_id,
        "managed": t.managed, "next_option": t.next_option,
    }


def transition_from_dict(d: dict) -> TransitionRecord:
    o = d["option"]
    option = OptionRecord(o["kind"], int(o["destination"]), float(o["duration_min"]), o.get("price"),
                          o.get("cost"), o.get("direction"))
    nxt = d.get("next_option")
    return TransitionRecord(state_from_dict(d["s"]), option, float(d["reward"]), int(d["k"]),
                            state_from_dict(d["s_next"]), bool(d.get("terminal", False)),
                            int(d.get("driver_id", -1)), bool(d.get("managed", False)),
                            None if nxt is None else int(nxt))


def event_to_dict(e: TrajectoryEvent) -> dict:
    return {"driver_id": e.driver_id, "kind": e.kind, "time": e.time, "location": list(e.location), "cell": e.cell}


def event_from_dict(d: dict) -> TrajectoryEvent:
    if d["kind"] not in ("online", "offline", "dispatch", "idle_start"):
        raise ValueError(f"unknown event kind {d['kind']!r}")
    loc = d["location"]
    return TrajectoryEvent(int(d["driver_id"]), d["kind"], float(d["time"]), (float(loc[0]), float(loc[1])),
                           int(d["cell"]))


def driver_to_dict(x: DriverRecord) -> dict:
    return asdict(x)


def driver_from_dict(d: dict) -> DriverRecord:
    return DriverRecord(int(d["driver_id"]), float(d["income"]), float(d["online_hours"]),
                        float(d["service_hours"]), bool(d.get("managed", False)))


def write_jsonl(path: str | Path, items: Iterable[T], encode: Callable[[T], dict]) -> int:
    n = 0
    with open(path, "w") as fh:
        for item in items:
            fh.write(json.dumps(encode(item), sort_keys=True))
            fh.write("\n")
            n += 1
    return n


def iter_jsonl(path: str | Path, decode: Callable[[dict], T]) -> Iterator[T]:
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                yield decode(json.loads(line))
            except (ValueError, KeyError, TypeError, IndexError) as exc:
                raise DataError(f"{path}:{lineno}: {type(exc).__name__}: {exc}") from exc


def read_jsonl(path: str | Path, decode: Callable[[dict], T]) -> list[T]:
    return list(iter_jsonl(path, decode))


def read_many(paths: Iterable[str | Path], decode: Callable[[dict], T]) -> list[T]:
    return [x for p in paths for x in iter_jsonl(p, decode)]
