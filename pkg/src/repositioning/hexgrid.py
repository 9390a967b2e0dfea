"""Hexagonal tessellation of a city.

Cells are pointy-top hexagons addressed by axial coordinates ``(q, r)``.
Geographic points are mapped onto a local tangent plane (metres east /
north of the grid origin) where the hexagon geometry is exact; all
adjacency and containment questions are answered in that plane.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

EARTH_RADIUS_M = 6_371_008.8
SQRT3 = math.sqrt(3.0)

# Fixed neighbour ordering; every "direction index" in the package refers to it.
AXIAL_DIRECTIONS: tuple[tuple[int, int], ...] = (
    (1, 0), (1, -1), (0, -1), (-1, 0), (-1, 1), (0, 1),
)

LatLon = tuple[float, float]


class UnknownCellError(KeyError):
    pass


class OutOfRegionError(ValueError):
    pass


def axial_round(qf: float, rf: float) -> tuple[int, int]:
    """Round fractional axial coordinates to the containing hexagon."""
    sf = -qf - rf
    q, r, s = round(qf), round(rf), round(sf)
    dq, dr, ds = abs(q - qf), abs(r - rf), abs(s - sf)
    if dq > dr and dq > ds:
        q = -r - s
    elif dr > ds:
        r = -q - s
    return int(q), int(r)


def axial_round_array(qf: np.ndarray, rf: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    sf = -qf - rf
    q, r, s = np.rint(qf), np.rint(rf), np.rint(sf)
    dq, dr, ds = np.abs(q - qf), np.abs(r - rf), np.abs(s - sf)
    fix_q = (dq > dr) & (dq > ds)
    fix_r = ~fix_q & (dr > ds)
    q = np.where(fix_q, -r - s, q)
    r = np.where(fix_r, -q - s, r)
    return q.astype(np.int64), r.astype(np.int64)


def axial_to_xy(q: float, r: float, edge_m: float) -> tuple[float, float]:
    return edge_m * SQRT3 * (q + r / 2.0), edge_m * 1.5 * r


def xy_to_axial_frac(x, y, edge_m: float):
    qf = (SQRT3 / 3.0 * x - y / 3.0) / edge_m
    rf = (2.0 / 3.0 * y) / edge_m
    return qf, rf


def hex_distance(a: tuple[int, int], b: tuple[int, int]) -> int:
    dq, dr = a[0] - b[0], a[1] - b[1]
    return (abs(dq) + abs(dr) + abs(dq + dr)) // 2


def haversine_m(a: LatLon, b: LatLon) -> float:
    lat1, lon1 = map(math.radians, a)
    lat2, lon2 = map(math.radians, b)
    h = math.sin((lat2 - lat1) / 2) ** 2 + math.cos(lat1) * math.cos(lat2) * math.sin((lon2 - lon1) / 2) ** 2
    return 2 * EARTH_RADIUS_M * math.asin(math.sqrt(h))


@dataclass(frozen=True)
class HexCell:
    id: int
    axial: tuple[int, int]
    center: LatLon
    valid: bool = True
    pickup_points: tuple[LatLon, ...] = ()


class HexGrid:
    """Immutable index of hexagonal cells over a bounded region.

    Cell ids are dense integers assigned in ``(r, q)`` order, so "lowest id"
    tie-breaks are reproducible from the axial layout alone.
    """

    def __init__(
        self,
        edge_m: float,
        axial_cells: Iterable[tuple[int, int]],
        origin: LatLon,
        invalid: Iterable[tuple[int, int]] = (),
        pickup_points: Mapping[tuple[int, int], Sequence[LatLon]] | None = None,
        bbox: tuple[float, float, float, float] | None = None,
    ):
        if edge_m <= 0:
            raise ValueError("edge length must be positive")
        self.edge_m = float(edge_m)
        self.origin = (float(origin[0]), float(origin[1]))
        self.bbox = bbox
        self._m_per_deg_lat = math.pi / 180.0 * EARTH_RADIUS_M
        self._m_per_deg_lon = self._m_per_deg_lat * math.cos(math.radians(self.origin[0]))

        axial_sorted = sorted({(int(q), int(r)) for q, r in axial_cells}, key=lambda a: (a[1], a[0]))
        if not axial_sorted:
            raise ValueError("grid has no cells")
        invalid_set = {(int(q), int(r)) for q, r in invalid}
        pickup_points = pickup_points or {}

        self._by_axial: dict[tuple[int, int], int] = {}
        cells = []
        centers_xy = np.empty((len(axial_sorted), 2))
        for cid, ax in enumerate(axial_sorted):
            x, y = axial_to_xy(ax[0], ax[1], self.edge_m)
            centers_xy[cid] = (x, y)
            center = self.to_latlon(x, y)
            pts = tuple((float(p[0]), float(p[1])) for p in pickup_points.get(ax, ())) or (center,)
            cells.append(HexCell(cid, ax, center, ax not in invalid_set, pts))
            self._by_axial[ax] = cid
        self._cells: tuple[HexCell, ...] = tuple(cells)
        self.centers_xy = centers_xy
        self.centers_xy.setflags(write=False)
        self.valid_mask = np.array([c.valid for c in cells], dtype=bool)
        self.valid_mask.setflags(write=False)

        # adjacency[c, d] = neighbour id in direction d or -1 if absent from the grid
        adj = np.full((len(cells), 6), -1, dtype=np.int64)
        for c in cells:
            for d, (dq, dr) in enumerate(AXIAL_DIRECTIONS):
                adj[c.id, d] = self._by_axial.get((c.axial[0] + dq, c.axial[1] + dr), -1)
        self.adjacency = adj
        self.adjacency.setflags(write=False)
        self._neighbors = tuple(
            tuple(int(n) for n in adj[c.id] if n >= 0 and self.valid_mask[n]) for c in cells
        )

        rep = np.empty((len(cells), 2))
        for c in cells:
            cx, cy = centers_xy[c.id]
            pts = [self.to_xy(*p) for p in c.pickup_points]
            best = min(pts, key=lambda p: (p[0] - cx) ** 2 + (p[1] - cy) ** 2)
            rep[c.id] = best
        self.representative_xy = rep
        self.representative_xy.setflags(write=False)

    # -- constructors -------------------------------------------------------

    @classmethod
    def from_bbox(
        cls,
        edge_m: float,
        bbox: tuple[float, float, float, float],
        invalid: Iterable[tuple[int, int]] = (),
        pickup_points: Mapping[tuple[int, int], Sequence[LatLon]] | None = None,
    ) -> "HexGrid":
        """All cells whose centres lie inside ``(min_lat, min_lon, max_lat, max_lon)``."""
        min_lat, min_lon, max_lat, max_lon = bbox
        if not (max_lat > min_lat and max_lon > min_lon):
            raise ValueError(f"degenerate bounding box {bbox}")
        origin = (min_lat, min_lon)
        m_lat = math.pi / 180.0 * EARTH_RADIUS_M
        m_lon = m_lat * math.cos(math.radians(min_lat))
        width, height = (max_lon - min_lon) * m_lon, (max_lat - min_lat) * m_lat
        r_max = int(math.floor(height / (1.5 * edge_m)))
        cells = []
        for r in range(0, r_max + 1):
            q_lo = int(math.ceil(-r / 2.0))
            q_hi = int(math.floor(width / (SQRT3 * edge_m) - r / 2.0))
            for q in range(q_lo, q_hi + 1):
                cells.append((q, r))
        return cls(edge_m, cells, origin, invalid, pickup_points, bbox=tuple(bbox))

    @classmethod
    def hexagon(cls, radius: int, edge_m: float, origin: LatLon = (0.0, 0.0),
                invalid: Iterable[tuple[int, int]] = ()) -> "HexGrid":
        """A hexagon-shaped grid of ``1 + 3R(R+1)`` cells centred on axial (0, 0)."""
        cells = [
            (q, r)
            for q in range(-radius, radius + 1)
            for r in range(-radius, radius + 1)
            if abs(q + r) <= radius
        ]
        return cls(edge_m, cells, origin, invalid)

    # -- projection ---------------------------------------------------------

    def to_xy(self, lat: float, lon: float) -> tuple[float, float]:
        return ((lon - self.origin[1]) * self._m_per_deg_lon, (lat - self.origin[0]) * self._m_per_deg_lat)

    def to_latlon(self, x: float, y: float) -> LatLon:
        return (self.origin[0] + y / self._m_per_deg_lat, self.origin[1] + x / self._m_per_deg_lon)

    def to_xy_array(self, latlon: np.ndarray) -> np.ndarray:
        latlon = np.asarray(latlon, dtype=float)
        return np.stack(
            [(latlon[..., 1] - self.origin[1]) * self._m_per_deg_lon,
             (latlon[..., 0] - self.origin[0]) * self._m_per_deg_lat], axis=-1)

    # -- lookups ------------------------------------------------------------

    def __len__(self) -> int:
        return len(self._cells)

    def __iter__(self):
        return iter(self._cells)

    @property
    def cells(self) -> tuple[HexCell, ...]:
        return self._cells

    @property
    def valid_ids(self) -> list[int]:
        return [c.id for c in self._cells if c.valid]

    def cell(self, cid: int) -> HexCell:
        if not 0 <= cid < len(self._cells):
            raise UnknownCellError(cid)
        return self._cells[cid]

    def id_of(self, axial: tuple[int, int]) -> int:
        try:
            return self._by_axial[(int(axial[0]), int(axial[1]))]
        except KeyError:
            raise UnknownCellError(axial) from None

    def has_axial(self, axial: tuple[int, int]) -> bool:
        return (int(axial[0]), int(axial[1])) in self._by_axial

    def neighbors(self, cid: int) -> list[int]:
        """Valid cells adjacent to ``cid`` in fixed axial-direction order."""
        if not 0 <= cid < len(self._cells):
            raise UnknownCellError(cid)
        return list(self._neighbors[cid])

    def neighbor_in_direction(self, cid: int, direction: int) -> int:
        """Neighbour id in ``direction`` (0-5), or -1 when absent or invalid."""
        n = int(self.adjacency[cid, direction])
        return n if n >= 0 and self.valid_mask[n] else -1

    def cells_within(self, cid: int, n: int) -> set[int]:
        if n < 0:
            raise ValueError("ring radius must be non-negative")
        self.cell(cid)
        seen = {cid}
        frontier = [cid]
        for _ in range(n):
            nxt = []
            for c in frontier:
                for nb in self._neighbors[c]:
                    if nb not in seen:
                        seen.add(nb)
                        nxt.append(nb)
            frontier = nxt
        return seen

    def distance(self, a: int, b: int) -> int:
        return hex_distance(self.cell(a).axial, self.cell(b).axial)

    def nearest_valid(self, cid: int, exclude_self: bool = True) -> tuple[int, list[int]]:
        """Closest valid cells by ring distance, walking through any cell.

        Returns ``(ring, ids)``; ``ids`` is empty when no valid cell exists.
        """
        self.cell(cid)
        seen = {cid}
        frontier = [cid]
        ring = 0
        if not exclude_self and self.valid_mask[cid]:
            return 0, [cid]
        while frontier:
            ring += 1
            nxt = []
            for c in frontier:
                for nb in self.adjacency[c]:
                    nb = int(nb)
                    if nb >= 0 and nb not in seen:
                        seen.add(nb)
                        nxt.append(nb)
            hits = sorted(c for c in nxt if self.valid_mask[c])
            if hits:
                return ring, hits
            frontier = nxt
        return ring, []

    def locate_xy(self, x: float, y: float) -> int:
        qf, rf = xy_to_axial_frac(x, y, self.edge_m)
        q0, r0 = axial_round(qf, rf)
        cands = [(q0, r0)] + [(q0 + dq, r0 + dr) for dq, dr in AXIAL_DIRECTIONS]
        dists = []
        for q, r in cands:
            cx, cy = axial_to_xy(q, r, self.edge_m)
            dists.append(math.hypot(x - cx, y - cy))
        best = min(dists)
        tol = 1e-9 * max(1.0, self.edge_m)
        tied = [ax for ax, d in zip(cands, dists) if d <= best + tol and ax in self._by_axial]
        if not tied:
            raise OutOfRegionError(f"point ({x:.1f}, {y:.1f}) m is outside the grid")
        return min(self._by_axial[ax] for ax in tied)

    def locate(self, lat: float, lon: float) -> int:
        return self.locate_xy(*self.to_xy(lat, lon))

    def locate_many_xy(self, xy: np.ndarray) -> np.ndarray:
        """Vectorised interior lookup (ties resolved by rounding, not by id).

        Used on hot simulation paths where points are never exactly on edges;
        falls back to :meth:`locate_xy` for points that round outside the grid.
        """
        xy = np.asarray(xy, dtype=float).reshape(-1, 2)
        qf, rf = xy_to_axial_frac(xy[:, 0], xy[:, 1], self.edge_m)
        q, r = axial_round_array(qf, rf)
        out = np.empty(len(xy), dtype=np.int64)
        for i, (qq, rr) in enumerate(zip(q.tolist(), r.tolist())):
            cid = self._by_axial.get((qq, rr))
            out[i] = cid if cid is not None else self.locate_xy(xy[i, 0], xy[i, 1])
        return out

    def polygon_xy(self, cid: int) -> np.ndarray:
        cx, cy = self.centers_xy[cid]
        ang = np.radians(60.0 * np.arange(6) - 30.0)
        return np.stack([cx + self.edge_m * np.cos(ang), cy + self.edge_m * np.sin(ang)], axis=1)

    def representative_point(self, cid: int) -> LatLon:
        return self.to_latlon(*self.representative_xy[cid])

    # -- persistence --------------------------------------------------------

    def to_dict(self) -> dict:
        invalid = [list(c.axial) for c in self._cells if not c.valid]
        pickups = [
            {"axial": list(c.axial), "points": [list(p) for p in c.pickup_points]}
            for c in self._cells
            if c.pickup_points != (c.center,)
        ]
        d = {"edge_m": self.edge_m, "invalid": invalid, "pickup_points": pickups}
        if self.bbox is not None:
            d["bbox"] = list(self.bbox)
        else:
            d["origin"] = list(self.origin)
            d["cells"] = [list(c.axial) for c in self._cells]
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "HexGrid":
        invalid = [tuple(a) for a in d.get("invalid", [])]
        pickups = {tuple(p["axial"]): [tuple(x) for x in p["points"]] for p in d.get("pickup_points", [])}
        if "bbox" in d:
            return cls.from_bbox(float(d["edge_m"]), tuple(d["bbox"]), invalid, pickups)
        return cls(float(d["edge_m"]), [tuple(a) for a in d["cells"]], tuple(d["origin"]), invalid, pickups)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def load(cls, path: str | Path) -> "HexGrid":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class TravelTimeModel:
    """Constant-speed travel times on tangent-plane distance.

    ``overrides`` maps ``(origin_cell, dest_cell)`` to minutes and replaces the
    distance-based estimate for points in distinct cells of that pair.
    """

    grid: HexGrid
    speed_m_per_min: float = 400.0
    overrides: Mapping[tuple[int, int], float] = field(default_factory=dict)

    def __post_init__(self):
        if self.speed_m_per_min <= 0:
            raise ValueError("speed must be positive")

    def distance_xy(self, a, b) -> np.ndarray | float:
        a = np.asarray(a, dtype=float)
        b = np.asarray(b, dtype=float)
        return np.hypot(a[..., 0] - b[..., 0], a[..., 1] - b[..., 1])

    def eta_xy(self, a, b):
        minutes = self.distance_xy(a, b) / self.speed_m_per_min
        if not self.overrides:
            return minutes
        a2 = np.asarray(a, dtype=float).reshape(-1, 2)
        b2 = np.asarray(b, dtype=float).reshape(-1, 2)
        minutes = np.array(np.broadcast_to(minutes, np.broadcast_shapes(a2.shape[:1], b2.shape[:1])), dtype=float)
        ca = self.grid.locate_many_xy(a2)
        cb = self.grid.locate_many_xy(b2)
        ca, cb = np.broadcast_arrays(ca, cb)
        for i, (x, y) in enumerate(zip(ca.tolist(), cb.tolist())):
            if x != y and (x, y) in self.overrides:
                minutes[i] = self.overrides[(x, y)]
        return minutes if np.ndim(self.distance_xy(a, b)) else float(minutes[0])

    def eta(self, origin: LatLon, dest: LatLon) -> float:
        """Minutes from ``origin`` to ``dest``; both must lie inside the grid."""
        pa = self.grid.to_xy(*origin)
        pb = self.grid.to_xy(*dest)
        self.grid.locate_xy(*pa)
        self.grid.locate_xy(*pb)
        return float(self.eta_xy(pa, pb))

    def eta_cells(self, a: int, b: int) -> float:
        if a != b and (a, b) in self.overrides:
            return float(self.overrides[(a, b)])
        return float(self.distance_xy(self.grid.representative_xy[a], self.grid.representative_xy[b]) / self.speed_m_per_min)
