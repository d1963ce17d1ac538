"""Collision intervals along the reference and yield/pass configurations.

A predicted pedestrian box is mapped to world rectangles (one per edge
polyline segment it overlaps) and intersected with a tube of radius
Delta = e_y_max + delta_safe around the reference path.  The forbidden
arc-length window per (obstacle, step) is the interval between the
outermost intersections; the avoidance residual keeps the vehicle behind
its lower end when yielding and past its upper end when passing.

Sign convention: residual <= 0 means safe.  Yielding pins the vehicle to
s <= sigma_lo and passing to s >= sigma_hi, the geometrically safe
pairing for both decisions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .pedestrians import PedestrianBelief
from .reference import ReferencePath

YIELD = "yield"
PASS = "pass"


@dataclass(frozen=True)
class CorridorParams:
    """Tube radius around the reference: Delta = e_y_max + delta_safe."""

    e_y_max: float = 0.4
    delta_safe: float = 1.0

    def __post_init__(self):
        if self.e_y_max <= 0 or self.delta_safe <= 0:
            raise ValueError("corridor widths must be positive")

    @property
    def delta_total(self) -> float:
        return self.e_y_max + self.delta_safe


@dataclass(frozen=True)
class CollisionInterval:
    obstacle_id: str
    step: int
    sigma_lo: float
    sigma_hi: float
    empty: bool

    def __post_init__(self):
        if not self.empty and self.sigma_lo > self.sigma_hi:
            raise ValueError("need sigma_lo <= sigma_hi")

    @classmethod
    def none(cls, obstacle_id: str, step: int) -> "CollisionInterval":
        return cls(obstacle_id, step, np.nan, np.nan, True)


@dataclass(frozen=True)
class YieldConfiguration:
    config_id: str
    decisions: dict[str, str]

    def decision(self, obstacle_id: str) -> str:
        return self.decisions.get(obstacle_id, YIELD)


def _box_pieces(box: PedestrianBelief):
    """World rectangles covering the box, one per overlapped edge segment.

    Each piece is (center, tangent, half_lon, half_lat); boxes protruding
    past the polyline ends ride on the terminal segment's frame.
    """
    edge = box.edge
    cum = edge._cum
    pieces = []
    n_seg = len(cum) - 1
    for i in range(n_seg):
        seg_lo = cum[i] if i > 0 else -np.inf
        seg_hi = cum[i + 1] if i < n_seg - 1 else np.inf
        lo = max(box.lon_lo, seg_lo)
        hi = min(box.lon_hi, seg_hi)
        if lo > hi:
            continue
        a = edge.path[i]
        t = (edge.path[i + 1] - a) / edge._seg_len[i]
        n = np.array([-t[1], t[0]])
        mid_lon = 0.5 * (lo + hi)
        mid_lat = 0.5 * (box.lat_lo + box.lat_hi)
        center = a + (mid_lon - cum[i]) * t + mid_lat * n
        pieces.append((center, t, 0.5 * (hi - lo),
                       0.5 * (box.lat_hi - box.lat_lo)))
    return pieces


def _distance_to_pieces(points: np.ndarray, pieces) -> np.ndarray:
    """Euclidean distance from each point to the union of rectangles."""
    best = np.full(points.shape[0], np.inf)
    for center, t, half_lon, half_lat in pieces:
        rel = points - center
        u = rel @ t
        v = rel @ np.array([-t[1], t[0]])
        du = np.maximum(np.abs(u) - half_lon, 0.0)
        dv = np.maximum(np.abs(v) - half_lat, 0.0)
        best = np.minimum(best, np.hypot(du, dv))
    return best


def _path_points(path: ReferencePath, s_values: np.ndarray) -> np.ndarray:
    return np.column_stack([np.interp(s_values, path.s, path._ch["x"]),
                            np.interp(s_values, path.s, path._ch["y"])])


def tube_interval(path: ReferencePath, box: PedestrianBelief,
                  c: CorridorParams, step: int = 0,
                  refine: float = 0.005) -> CollisionInterval:
    """Forbidden arc-length window {s : dist(path(s), box) <= Delta}.

    Coarse scan on the path samples, dense rescan near candidates, then
    bisection on both extreme crossings.  Disjoint windows are merged into
    their hull.
    """
    delta = c.delta_total
    pieces = _box_pieces(box)
    coarse = _distance_to_pieces(_path_points(path, path.s), pieces)
    near = coarse <= delta + 1.0
    if not near.any():
        return CollisionInterval.none(box.obstacle_id, step)
    idx = np.flatnonzero(near)
    s_lo = max(path.s_min, path.s[idx[0]] - 1.0)
    s_hi = min(path.s_max, path.s[idx[-1]] + 1.0)
    grid = np.arange(s_lo, s_hi + refine / 2, refine)
    dist = _distance_to_pieces(_path_points(path, grid), pieces)
    inside = dist <= delta
    if not inside.any():
        return CollisionInterval.none(box.obstacle_id, step)
    first = int(np.flatnonzero(inside)[0])
    last = int(np.flatnonzero(inside)[-1])

    def bisect(lo_s, hi_s, want_inside_right):
        # invariant: predicate differs at the bracket ends
        for _ in range(40):
            mid = 0.5 * (lo_s + hi_s)
            d = _distance_to_pieces(_path_points(path, np.array([mid])), pieces)[0]
            if (d <= delta) == want_inside_right:
                hi_s = mid
            else:
                lo_s = mid
        return 0.5 * (lo_s + hi_s)

    sigma_lo = grid[first] if first == 0 else bisect(grid[first - 1], grid[first], True)
    sigma_hi = grid[last] if last == len(grid) - 1 else bisect(
        grid[last + 1], grid[last], True)
    return CollisionInterval(box.obstacle_id, step, float(sigma_lo),
                             float(max(sigma_lo, sigma_hi)), False)


@dataclass
class ObstacleIntervals:
    """Per-step forbidden windows for one obstacle (union hull over modes)."""

    obstacle_id: str
    sigma_lo: np.ndarray   # (steps + 1,), nan where empty
    sigma_hi: np.ndarray
    empty: np.ndarray      # (steps + 1,) bool

    def interval(self, step: int) -> CollisionInterval:
        if self.empty[step]:
            return CollisionInterval.none(self.obstacle_id, step)
        return CollisionInterval(self.obstacle_id, step,
                                 float(self.sigma_lo[step]),
                                 float(self.sigma_hi[step]), False)

    @property
    def entry_step(self) -> int | None:
        nz = np.flatnonzero(~self.empty)
        return int(nz[0]) if nz.size else None

    @property
    def s_range(self) -> tuple[float, float] | None:
        if self.empty.all():
            return None
        return (float(np.nanmin(self.sigma_lo)), float(np.nanmax(self.sigma_hi)))


def build_collision_intervals(predictions: dict[str, list[list[PedestrianBelief]]],
                              path: ReferencePath,
                              c: CorridorParams) -> dict[str, ObstacleIntervals]:
    """One interval table per obstacle; multimodal steps take the hull."""
    out = {}
    for obstacle_id, series in predictions.items():
        n = len(series)
        lo = np.full(n, np.nan)
        hi = np.full(n, np.nan)
        empty = np.ones(n, dtype=bool)
        for step, modes in enumerate(series):
            los, his = [], []
            for mode in modes:
                iv = tube_interval(path, mode, c, step)
                if not iv.empty:
                    los.append(iv.sigma_lo)
                    his.append(iv.sigma_hi)
            if los:
                lo[step] = min(los)
                hi[step] = max(his)
                empty[step] = False
        out[obstacle_id] = ObstacleIntervals(obstacle_id, lo, hi, empty)
    return out


def g_eval(s: float, interval: CollisionInterval, decision: str) -> float:
    """Avoidance residual; <= 0 is safe, empty windows contribute 0."""
    if interval.empty:
        return 0.0
    if decision == YIELD:
        return s - interval.sigma_lo
    if decision == PASS:
        return interval.sigma_hi - s
    raise ValueError(f"unknown decision {decision!r}")


def _clusters(tables: list[ObstacleIntervals]) -> list[list[ObstacleIntervals]]:
    """Union-find on s-range overlap."""
    parent = list(range(len(tables)))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for i in range(len(tables)):
        for j in range(i + 1, len(tables)):
            ri, rj = tables[i].s_range, tables[j].s_range
            if ri and rj and ri[0] <= rj[1] and rj[0] <= ri[1]:
                parent[find(i)] = find(j)
    groups: dict[int, list[ObstacleIntervals]] = {}
    for i, t in enumerate(tables):
        groups.setdefault(find(i), []).append(t)
    return list(groups.values())


def enumerate_configurations(intervals: dict[str, ObstacleIntervals],
                             ego_s: float,
                             horizon: int | None = None) -> list[YieldConfiguration]:
    """Yield/pass combinations for the intersection closest ahead.

    Obstacles are clustered by arc-length overlap.  Only the closest
    cluster not yet behind the vehicle is enumerated: its members are
    sorted by entry time and the monotone yield-prefixes emitted (yield to
    the j earliest enterers, pass the rest).  Everything else always
    yields, so the list has at most cluster size + 1 entries.
    """
    active = [t for t in intervals.values() if t.s_range is not None]
    all_ids = list(intervals.keys())
    if not active:
        return [YieldConfiguration("all-yield", {i: YIELD for i in all_ids})]
    ahead = [c for c in _clusters(active)
             if max(t.s_range[1] for t in c) >= ego_s - 1e-9]
    if not ahead:
        return [YieldConfiguration("all-yield", {i: YIELD for i in all_ids})]
    closest = min(ahead, key=lambda c: min(t.s_range[0] for t in c))
    ordered = sorted(closest, key=lambda t: (t.entry_step, t.obstacle_id))
    configs = []
    for n_yield in range(len(ordered), -1, -1):
        decisions = {i: YIELD for i in all_ids}
        passing = [t.obstacle_id for t in ordered[n_yield:]]
        for pid in passing:
            decisions[pid] = PASS
        tag = "yield-all" if not passing else "pass:" + ",".join(sorted(passing))
        configs.append(YieldConfiguration(tag, decisions))
    return configs
