"""Walkable road graph and pedestrian reachable-set prediction.

Pedestrians move along graph edges in (longitudinal, lateral) edge
coordinates.  The nominal state advances at the edge walking speed with a
stabilizing lateral feedback; uncertainty is an axis-aligned box whose
exact interval image is propagated step by step, so any disturbance with
||xi||_inf <= xi_bar stays inside the predicted boxes by construction.

Occlusion handling places virtual walkers at the visible/occluded
boundary of every hidden edge segment, so the prediction never claims to
know more than the sensor saw.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np


class GraphDisconnectedError(Exception):
    """A walker reached the end of an edge with no successor."""


@dataclass(frozen=True)
class Edge:
    """Directed walkable edge with a polyline reference path."""

    edge_id: str
    from_node: int
    to_node: int
    path: np.ndarray          # (n, 2) polyline, walked start -> end
    v_ped: float = 1.4        # m/s reference walking speed
    width: float = 1.0        # m, informational

    def __post_init__(self):
        pts = np.atleast_2d(np.asarray(self.path, dtype=float))
        if pts.shape[0] < 2:
            raise ValueError("edge path needs >= 2 points")
        if self.v_ped <= 0:
            raise ValueError("v_ped must be positive")
        object.__setattr__(self, "path", pts)
        seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
        object.__setattr__(self, "_seg_len", seg)
        object.__setattr__(self, "_cum", np.hstack([0.0, np.cumsum(seg)]))

    @property
    def length(self) -> float:
        return float(self._cum[-1])

    def point_at(self, lon, lat=0.0):
        """World position of edge coordinates; extrapolates past the ends."""
        lon = np.asarray(lon, dtype=float)
        lat = np.asarray(lat, dtype=float)
        idx = np.clip(np.searchsorted(self._cum, lon, side="right") - 1,
                      0, len(self._seg_len) - 1)
        t0 = self.path[idx]
        d = (self.path[idx + 1] - t0) / self._seg_len[idx][..., None]
        base = t0 + (lon - self._cum[idx])[..., None] * d
        normal = np.stack([-d[..., 1], d[..., 0]], axis=-1)
        return base + lat[..., None] * normal

    def tangent_at(self, lon):
        lon = np.asarray(lon, dtype=float)
        idx = np.clip(np.searchsorted(self._cum, lon, side="right") - 1,
                      0, len(self._seg_len) - 1)
        d = self.path[idx + 1] - self.path[idx]
        return d / np.linalg.norm(d, axis=-1, keepdims=True)


@dataclass(frozen=True)
class RoadGraph:
    nodes: np.ndarray                 # (n, 2)
    edges: tuple[Edge, ...]

    def __post_init__(self):
        nodes = np.atleast_2d(np.asarray(self.nodes, dtype=float))
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "edges", tuple(self.edges))
        by_id = {}
        for e in self.edges:
            if e.edge_id in by_id:
                raise ValueError(f"duplicate edge id {e.edge_id}")
            for node, endpoint in ((e.from_node, e.path[0]),
                                   (e.to_node, e.path[-1])):
                if np.linalg.norm(nodes[node] - endpoint) > 1e-6:
                    raise ValueError(
                        f"edge {e.edge_id} endpoint does not coincide with node {node}")
            by_id[e.edge_id] = e
        object.__setattr__(self, "_by_id", by_id)

    def edge(self, edge_id: str) -> Edge:
        return self._by_id[edge_id]

    def successors(self, e: Edge) -> list[Edge]:
        return [o for o in self.edges if o.from_node == e.to_node]


@dataclass(frozen=True)
class PredictionParams:
    lateral_gain: float = 1.0          # 1/s, K in the lateral feedback
    xi_bar: float = 0.3                # m/s disturbance bound
    ts: float = 0.05                   # s
    horizon: int = 100                 # prediction steps M
    transition_threshold: float = 0.5  # m before an edge end

    def __post_init__(self):
        if not 0.0 < self.ts * self.lateral_gain < 1.0:
            raise ValueError("need 0 < ts * K < 1 for lateral contraction")
        if self.xi_bar < 0:
            raise ValueError("xi_bar must be nonnegative")


@dataclass(frozen=True)
class PedestrianBelief:
    """Nominal walker state plus box uncertainty, in edge coordinates."""

    edge: Edge
    w_lon: float
    w_lat: float
    lon_lo: float
    lon_hi: float
    lat_lo: float
    lat_hi: float
    mode_weight: float = 1.0
    obstacle_id: str = ""

    def __post_init__(self):
        if not (self.lon_lo <= self.w_lon <= self.lon_hi
                and self.lat_lo <= self.w_lat <= self.lat_hi):
            raise ValueError("nominal state must lie inside the box")

    @property
    def edge_id(self) -> str:
        return self.edge.edge_id

    @classmethod
    def from_measurement(cls, edge: Edge, w_lon: float, w_lat: float,
                         obstacle_id: str = "") -> "PedestrianBelief":
        """Degenerate (point) box at a measurement."""
        return cls(edge, w_lon, w_lat, w_lon, w_lon, w_lat, w_lat,
                   obstacle_id=obstacle_id)


def propagate_nominal(b: PedestrianBelief, graph: RoadGraph,
                      p: PredictionParams) -> list[PedestrianBelief]:
    """Advance the nominal walker one step; splits at branch nodes.

    Returns one belief per reachable edge (usually a single element).  A
    transition fires when the advanced nominal is within the threshold of
    the edge end; overshoot is carried onto each successor edge.
    """
    lon = b.w_lon + p.ts * b.edge.v_ped
    lat = (1.0 - p.ts * p.lateral_gain) * b.w_lat
    moved = replace(b, w_lon=lon, w_lat=lat,
                    lon_lo=lon, lon_hi=lon, lat_lo=lat, lat_hi=lat)
    return _maybe_transition(moved, graph, p)


def _maybe_transition(b: PedestrianBelief, graph: RoadGraph,
                      p: PredictionParams) -> list[PedestrianBelief]:
    if b.w_lon < b.edge.length - p.transition_threshold:
        return [b]
    succ = graph.successors(b.edge)
    if not succ:
        raise GraphDisconnectedError(
            f"edge {b.edge_id} has no successor at its end")
    carry = b.w_lon - b.edge.length
    out = []
    for e in succ:
        out.append(PedestrianBelief(
            e, carry, b.w_lat,
            b.lon_lo - b.edge.length, b.lon_hi - b.edge.length,
            b.lat_lo, b.lat_hi,
            mode_weight=b.mode_weight / len(succ),
            obstacle_id=b.obstacle_id))
    return out


def propagate_box(b: PedestrianBelief, graph: RoadGraph,
                  p: PredictionParams) -> list[PedestrianBelief]:
    """Exact interval image of the closed-loop walker dynamics.

    Longitudinal bounds shift by ts * (v_ped -/+ xi_bar); lateral bounds
    contract by (1 - ts K) and inflate by ts * xi_bar.  Transitions follow
    the nominal, as in ``propagate_nominal``.
    """
    contr = 1.0 - p.ts * p.lateral_gain
    new = PedestrianBelief(
        b.edge,
        b.w_lon + p.ts * b.edge.v_ped,
        contr * b.w_lat,
        b.lon_lo + p.ts * (b.edge.v_ped - p.xi_bar),
        b.lon_hi + p.ts * (b.edge.v_ped + p.xi_bar),
        contr * b.lat_lo - p.ts * p.xi_bar,
        contr * b.lat_hi + p.ts * p.xi_bar,
        mode_weight=b.mode_weight,
        obstacle_id=b.obstacle_id)
    return _maybe_transition(new, graph, p)


def predict(b0: PedestrianBelief, graph: RoadGraph, p: PredictionParams,
            steps: int | None = None) -> list[list[PedestrianBelief]]:
    """Multimodal box prediction over the horizon.

    Returns a list of length steps + 1; entry n holds one belief per mode
    at prediction step n, with entry 0 the measurement itself.
    """
    steps = p.horizon if steps is None else steps
    out = [[b0]]
    for _ in range(steps):
        nxt: list[PedestrianBelief] = []
        for b in out[-1]:
            nxt.extend(propagate_box(b, graph, p))
        out.append(nxt)
    return out


@dataclass(frozen=True)
class OcclusionModel:
    """Single-origin 2-D visibility: range limit plus occluder polylines."""

    max_range: float = 50.0
    occluders: tuple[np.ndarray, ...] = ()

    def __post_init__(self):
        if self.max_range <= 0:
            raise ValueError("max_range must be positive")
        walls = tuple(np.atleast_2d(np.asarray(w, dtype=float))
                      for w in self.occluders)
        object.__setattr__(self, "occluders", walls)

    def visible(self, origin, points: np.ndarray) -> np.ndarray:
        """Boolean visibility of each point from the origin."""
        origin = np.asarray(origin, dtype=float)
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        vis = np.linalg.norm(pts - origin, axis=1) <= self.max_range
        for wall in self.occluders:
            for a, b in zip(wall[:-1], wall[1:]):
                vis &= ~_segments_cross(origin, pts, a, b)
        return vis


def _segments_cross(origin, pts, a, b) -> np.ndarray:
    """True where segment origin->pt strictly crosses segment a->b."""
    r = pts - origin
    s = b - a
    denom = r[:, 0] * s[1] - r[:, 1] * s[0]
    qp = a - origin
    t_num = qp[0] * s[1] - qp[1] * s[0]
    u_num = qp[0] * r[:, 1] - qp[1] * r[:, 0]
    with np.errstate(divide="ignore", invalid="ignore"):
        t = t_num / denom
        u = u_num / denom
    hit = (np.abs(denom) > 1e-14) & (t > 1e-9) & (t < 1.0 - 1e-9) \
        & (u >= -1e-9) & (u <= 1.0 + 1e-9)
    return hit


def _hidden_runs(visible: np.ndarray, lons: np.ndarray) -> list[tuple[float, float]]:
    """Maximal hidden [lon_a, lon_b] intervals from a sampled visibility mask."""
    runs = []
    start = None
    for i, v in enumerate(visible):
        if not v and start is None:
            start = i
        elif v and start is not None:
            runs.append((float(lons[start]), float(lons[i - 1])))
            start = None
    if start is not None:
        runs.append((float(lons[start]), float(lons[-1])))
    return runs


def closest_point_to_polyline(edge: Edge, polyline_pts: np.ndarray,
                              resolution: float = 0.25) -> float:
    """Edge arc length whose world point is nearest to a sampled polyline."""
    lons = np.arange(0.0, edge.length + resolution / 2, resolution)
    pts = edge.point_at(lons)
    d = np.linalg.norm(pts[:, None, :] - polyline_pts[None, :, :], axis=2).min(axis=1)
    return float(lons[int(np.argmin(d))])


def spawn_virtual_pedestrians(occ: OcclusionModel, sensor_origin, graph: RoadGraph,
                              p: PredictionParams, corridor_lon: dict[str, float],
                              resolution: float = 0.2) -> list[PedestrianBelief]:
    """One virtual walker per maximal occluded sub-segment of every edge.

    The walker is placed on the edge centerline at the hidden-run boundary
    closest (in walking distance along the edge) to ``corridor_lon`` (the
    edge arc length nearest the driving corridor) and walks with the edge
    at v_ped.  Fully visible edges contribute nothing.
    """
    out: list[PedestrianBelief] = []
    for edge in graph.edges:
        lons = np.arange(0.0, edge.length + resolution / 2, resolution)
        vis = occ.visible(sensor_origin, edge.point_at(lons))
        if vis.all():
            continue
        target = corridor_lon.get(edge.edge_id, edge.length)
        for k, (lo, hi) in enumerate(_hidden_runs(vis, lons)):
            if lo <= target <= hi:
                spawn = lo   # corridor point itself hidden: start of the run
            elif hi <= target:
                spawn = hi   # approach from behind the boundary
            else:
                spawn = lo   # run past the corridor, walks away harmlessly
            out.append(PedestrianBelief.from_measurement(
                edge, spawn, 0.0,
                obstacle_id=f"virtual:{edge.edge_id}:{k}"))
    return out


def sample_disturbances(rng: np.random.Generator, xi_bar: float, n: int) -> np.ndarray:
    """Uniform disturbance draws with ||xi||_inf <= xi_bar, shape (n, 2)."""
    return rng.uniform(-xi_bar, xi_bar, size=(n, 2))


def step_true_walker(b: PedestrianBelief, xi: np.ndarray, graph: RoadGraph,
                     p: PredictionParams,
                     rng: np.random.Generator | None = None) -> PedestrianBelief:
    """Ground-truth walker update under a concrete disturbance draw."""
    lon = b.w_lon + p.ts * (b.edge.v_ped + xi[0])
    lat = (1.0 - p.ts * p.lateral_gain) * b.w_lat + p.ts * xi[1]
    moved = PedestrianBelief(b.edge, lon, lat, lon, lon, lat, lat,
                             obstacle_id=b.obstacle_id)
    branches = _maybe_transition(moved, graph, p)
    if len(branches) == 1:
        return branches[0]
    pick = 0 if rng is None else int(rng.integers(0, len(branches)))
    return branches[pick]
