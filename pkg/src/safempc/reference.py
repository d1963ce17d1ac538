"""Reference path/trajectory: curvature, speed profile, frame mappings.

A path is a table of samples, piecewise linear in arc length s, carrying
the geometry channels (x, y, heading, kappa), the tracking profile
(v_ref, a_ref, delta_ref) and the feedforward channels derived from them
(alpha_ref, a_req_ref, delta_sp_ref).  Paths are immutable after
construction and safe to share.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import models
from .models import ErrorState, GlobalState, VehicleParams

_CHANNELS = ("x", "y", "heading", "kappa", "v_ref", "a_ref", "delta_ref",
             "alpha_ref", "a_req_ref", "delta_sp_ref")
_SLOPED = ("kappa", "delta_ref", "v_ref", "a_ref", "alpha_ref",
           "a_req_ref", "delta_sp_ref")


class OutOfRangeError(Exception):
    """Queried arc length lies outside the sampled path."""


class TooFarFromPathError(Exception):
    """Pose is too far laterally for a meaningful Frenet projection."""


def wrap_angle(angle):
    """Wrap to (-pi, pi]."""
    a = np.asarray(angle, dtype=float)
    out = -((-a + np.pi) % (2.0 * np.pi) - np.pi)
    return float(out) if np.isscalar(angle) else out


@dataclass(frozen=True)
class RefSample:
    s: float
    x: float
    y: float
    heading: float
    kappa: float
    v_ref: float
    a_ref: float
    delta_ref: float
    alpha_ref: float
    a_req_ref: float
    delta_sp_ref: float


class ReferencePath:
    """Immutable sampled reference path with linear interpolation in s."""

    def __init__(self, s, x, y, heading, kappa, v_ref, a_ref, delta_ref,
                 params: VehicleParams, delta_ref_bound: float = 0.2079,
                 alpha_ref=None):
        self.s = np.asarray(s, dtype=float)
        if self.s.size < 2 or (np.diff(self.s) <= 0).any():
            raise ValueError("s must be strictly increasing with >= 2 samples")
        store = {"x": x, "y": y, "heading": heading, "kappa": kappa,
                 "v_ref": v_ref, "a_ref": a_ref, "delta_ref": delta_ref}
        self._ch = {k: np.asarray(v, dtype=float) for k, v in store.items()}
        for k, v in self._ch.items():
            if v.shape != self.s.shape:
                raise ValueError(f"channel {k} length mismatch")
        self.params = params
        self.delta_ref_bound = float(delta_ref_bound)
        if np.abs(self._ch["delta_ref"]).max() > self.delta_ref_bound + 1e-9:
            raise ValueError("delta_ref exceeds the declared reference bound")
        self._derive_channels(alpha_ref)
        self._validate_heading()
        self._slopes = {}
        for k in _SLOPED:
            self._slopes[k] = np.diff(self._ch[k]) / np.diff(self.s)

    def _derive_channels(self, alpha_ref=None):
        p = self.params
        if alpha_ref is None:
            ds = np.gradient(self._ch["delta_ref"], self.s)
            alpha_ref = self._ch["v_ref"] * ds
        else:
            alpha_ref = np.asarray(alpha_ref, dtype=float)
        da = np.gradient(self._ch["a_ref"], self.s)
        a_req_ref = self._ch["a_ref"] + self._ch["v_ref"] * da / p.t_acc
        # flat feedforward for the second-order steering chain
        ddelta2 = self._ch["v_ref"] * np.gradient(alpha_ref, self.s)
        delta_sp_ref = (self._ch["delta_ref"] + 2.0 * p.w1 / p.w0 * alpha_ref
                        + ddelta2 / p.w0 ** 2)
        self._ch["alpha_ref"] = alpha_ref
        self._ch["a_req_ref"] = a_req_ref
        self._ch["delta_sp_ref"] = delta_sp_ref

    def _validate_heading(self):
        dx = np.diff(self._ch["x"])
        dy = np.diff(self._ch["y"])
        chord = np.arctan2(dy, dx)
        mid = 0.5 * (self._ch["heading"][:-1] + self._ch["heading"][1:])
        err = np.abs(wrap_angle(chord - mid))
        if err.max() > 1e-3:
            raise ValueError(f"heading deviates from tangent by {err.max():.2e} rad")

    @property
    def s_min(self) -> float:
        return float(self.s[0])

    @property
    def s_max(self) -> float:
        return float(self.s[-1])

    def channels(self, s_query) -> dict:
        """Interpolate all channels (plus per-segment slopes) at s_query."""
        sq = np.asarray(s_query, dtype=float)
        if (sq < self.s_min - 1e-9).any() or (sq > self.s_max + 1e-9).any():
            raise OutOfRangeError(
                f"s in [{sq.min():.2f}, {sq.max():.2f}] outside path "
                f"[{self.s_min:.2f}, {self.s_max:.2f}]")
        out = {k: np.interp(sq, self.s, v) for k, v in self._ch.items()}
        seg = np.clip(np.searchsorted(self.s, sq, side="right") - 1,
                      0, self.s.size - 2)
        for k in _SLOPED:
            out["d_" + k] = self._slopes[k][seg]
        return out

    def query(self, s: float) -> RefSample:
        ch = self.channels(np.asarray([float(s)]))
        return RefSample(float(s), *(float(ch[k][0]) for k in _CHANNELS))


def query(path: ReferencePath, s: float) -> RefSample:
    return path.query(s)


def _resample_profile(breakpoints, s_grid, smoothing: float = 0.0):
    """Piecewise-linear profile given as [[s, value], ...] onto a grid.

    ``smoothing`` (meters) applies two box-filter passes so profile corners
    become C1 and the reconstructed feedforward stays bounded.
    """
    bp = np.asarray(breakpoints, dtype=float)
    v = np.interp(s_grid, bp[:, 0], bp[:, 1])
    if smoothing > 0.0 and s_grid.size > 4:
        ds = float(s_grid[1] - s_grid[0])
        half = max(int(round(smoothing / ds / 2)), 1)
        kernel = np.ones(2 * half + 1) / (2 * half + 1)
        for _ in range(2):
            padded = np.concatenate([np.full(half * 2, v[0]), v,
                                     np.full(half * 2, v[-1])])
            v = np.convolve(padded, kernel, mode="same")[2 * half:-2 * half]
    return v


def _accel_from_speed(s_grid, v):
    """a = v * dv/ds evaluated on the grid."""
    dv = np.gradient(v, s_grid)
    return v * dv


def from_straight(length: float, v_ref: float, params: VehicleParams,
                  spacing: float = 0.25, origin=(0.0, 0.0),
                  heading: float = 0.0) -> ReferencePath:
    """Straight constant-speed path."""
    s = np.arange(0.0, length + spacing / 2, spacing)
    x = origin[0] + s * np.cos(heading)
    y = origin[1] + s * np.sin(heading)
    zeros = np.zeros_like(s)
    return ReferencePath(s, x, y, np.full_like(s, heading), zeros,
                         np.full_like(s, v_ref), zeros, zeros, params)


def _cumtrapz(values: np.ndarray, grid: np.ndarray) -> np.ndarray:
    out = np.zeros_like(values)
    out[1:] = np.cumsum(0.5 * (values[1:] + values[:-1]) * np.diff(grid))
    return out


def from_curvature_profile(segments, v_profile, params: VehicleParams,
                           spacing: float = 0.25, origin=(0.0, 0.0),
                           heading0: float = 0.0,
                           delta_ref_bound: float = 0.2079,
                           speed_smoothing: float = 0.0,
                           curvature_smoothing: float = 0.0) -> ReferencePath:
    """Path from piecewise-linear curvature segments [(length, k0, k1), ...].

    Geometry is integrated on a ~1 cm grid and then sampled at ``spacing``.
    ``curvature_smoothing`` (meters) box-filters kappa so its derivative is
    continuous; without it a ramp corner demands a step in the reference
    steering rate, which the second-order steering chain cannot execute and
    the feasibility replay would flag as drift.
    """
    total = sum(seg[0] for seg in segments)
    refine = max(int(round(spacing / 0.01)), 1)
    df = spacing / refine
    s_f = np.arange(0.0, total + df / 2, df)
    kappa_f = np.zeros_like(s_f)
    base_s = 0.0
    for length, k0, k1 in segments:
        inside = (s_f >= base_s - 1e-12) & (s_f <= base_s + length + 1e-12)
        kappa_f[inside] = k0 + (k1 - k0) * (s_f[inside] - base_s) / length
        base_s += length
    if curvature_smoothing > 0.0:
        half = max(int(round(curvature_smoothing / df / 2)), 1)
        kernel = np.ones(2 * half + 1) / (2 * half + 1)
        padded = np.concatenate([np.full(2 * half, kappa_f[0]), kappa_f,
                                 np.full(2 * half, kappa_f[-1])])
        kappa_f = np.convolve(padded, kernel, mode="same")[2 * half:-2 * half]
    theta_f = heading0 + _cumtrapz(kappa_f, s_f)
    x_f = origin[0] + _cumtrapz(np.cos(theta_f), s_f)
    y_f = origin[1] + _cumtrapz(np.sin(theta_f), s_f)
    dkappa_f = np.gradient(kappa_f, s_f)

    idx = np.arange(0, s_f.size, refine)
    s = s_f[idx]
    kappa = kappa_f[idx]
    v = _resample_profile(v_profile, s, speed_smoothing)
    a = _accel_from_speed(s, v)
    delta_ref = np.arctan(params.wheelbase_l * kappa)
    alpha_ref = (v * params.wheelbase_l * dkappa_f[idx]
                 / (1.0 + (params.wheelbase_l * kappa) ** 2))
    return ReferencePath(s, x_f[idx], y_f[idx], theta_f[idx], kappa, v, a,
                         delta_ref, params, delta_ref_bound,
                         alpha_ref=alpha_ref)


def from_polyline(points, v_profile, params: VehicleParams,
                  spacing: float = 0.25,
                  delta_ref_bound: float = 0.2079,
                  speed_smoothing: float = 0.0) -> ReferencePath:
    """Path from a 2-D polyline resampled at ``spacing``.

    Heading comes from chord tangents and curvature from the heading
    derivative, so noisy polylines should be smoothed upstream.
    """
    pts = np.asarray(points, dtype=float)
    seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    s_raw = np.hstack([0.0, np.cumsum(seg)])
    s = np.arange(0.0, s_raw[-1] + spacing / 2, spacing)
    x = np.interp(s, s_raw, pts[:, 0])
    y = np.interp(s, s_raw, pts[:, 1])
    dx = np.gradient(x, s)
    dy = np.gradient(y, s)
    heading = np.unwrap(np.arctan2(dy, dx))
    kappa = np.gradient(heading, s)
    v = _resample_profile(v_profile, s, speed_smoothing)
    a = _accel_from_speed(s, v)
    delta_ref = np.arctan(params.wheelbase_l * kappa)
    return ReferencePath(s, x, y, heading, kappa, v, a, delta_ref, params,
                         delta_ref_bound)


def _tangency_residual(path: ReferencePath, p: np.ndarray, s_val: float) -> float:
    """(p - c(s)) . t(s) on the interpolated channels; zero at the foot point."""
    ch = path.channels(np.asarray([s_val]))
    tangent = np.array([np.cos(ch["heading"][0]), np.sin(ch["heading"][0])])
    return float((p - np.array([ch["x"][0], ch["y"][0]])) @ tangent)


def global_to_frenet(path: ReferencePath, g: GlobalState,
                     max_lateral: float = 5.0) -> ErrorState:
    """Project a global pose onto the path (ties broken toward smaller s).

    A coarse chord projection picks the segment, then the foot point is
    refined by bisection on the tangency condition of the interpolated
    channels, so the mapping is the exact inverse of ``frenet_to_global``
    inside the validity tube.  e_y is positive left of the path; e_psi is
    wrapped to (-pi, pi].
    """
    px = path._ch["x"]
    py = path._ch["y"]
    p = np.array([g.x, g.y])
    dx = np.diff(px)
    dy = np.diff(py)
    seg_len2 = dx ** 2 + dy ** 2
    t = ((p[0] - px[:-1]) * dx + (p[1] - py[:-1]) * dy) / np.maximum(seg_len2, 1e-18)
    t = np.clip(t, 0.0, 1.0)
    cx = px[:-1] + t * dx
    cy = py[:-1] + t * dy
    d2 = (p[0] - cx) ** 2 + (p[1] - cy) ** 2
    i = int(np.argmin(d2))
    dist = float(np.sqrt(d2[i]))
    if dist > max_lateral:
        raise TooFarFromPathError(f"pose {dist:.2f} m from path")
    s_coarse = float(path.s[i] + t[i] * np.sqrt(seg_len2[i]))

    # widen around the chord foot until the tangency residual brackets zero
    span = float(np.sqrt(seg_len2[i]))
    lo = max(path.s_min, s_coarse - span)
    hi = min(path.s_max, s_coarse + span)
    f_lo = _tangency_residual(path, p, lo)
    f_hi = _tangency_residual(path, p, hi)
    for _ in range(20):
        if f_lo >= 0.0 >= f_hi:
            break
        if f_lo < 0.0:
            lo = max(path.s_min, lo - span)
            f_lo = _tangency_residual(path, p, lo)
        if f_hi > 0.0:
            hi = min(path.s_max, hi + span)
            f_hi = _tangency_residual(path, p, hi)
        if lo <= path.s_min and hi >= path.s_max:
            break
    s_star = s_coarse
    if f_lo >= 0.0 >= f_hi:
        for _ in range(60):
            mid = 0.5 * (lo + hi)
            f_mid = _tangency_residual(path, p, mid)
            if f_mid >= 0.0:
                lo = mid
            else:
                hi = mid
            if hi - lo < 1e-12:
                break
        s_star = 0.5 * (lo + hi)

    ch = path.channels(np.asarray([s_star]))
    heading = float(ch["heading"][0])
    normal = np.array([-np.sin(heading), np.cos(heading)])
    e_y = float((p - np.array([ch["x"][0], ch["y"][0]])) @ normal)
    e_psi = wrap_angle(g.psi - heading)
    return ErrorState(s_star, e_y, e_psi, g.delta, g.alpha, g.v, g.a)


def frenet_to_global(path: ReferencePath, e: ErrorState) -> GlobalState:
    ch = path.channels(np.asarray([e.s]))
    heading = float(ch["heading"][0])
    normal = np.array([-np.sin(heading), np.cos(heading)])
    pos = np.array([ch["x"][0], ch["y"][0]]) + e.e_y * normal
    return GlobalState(float(pos[0]), float(pos[1]), heading + e.e_psi,
                       e.delta, e.alpha, e.v, e.a)


@dataclass
class FeasibilityReport:
    passed: bool
    max_position_drift: float
    max_heading_drift: float
    max_speed_error: float
    max_h_residual: float
    worst_constraint: str


def check_reference_feasibility(path: ReferencePath, p: VehicleParams,
                                dt: float = 0.05) -> FeasibilityReport:
    """Replay the reference feedforward through the global model.

    Integrates the global dynamics open loop from an on-reference start
    while feeding the reconstructed inputs (a_req_ref, delta_sp_ref).
    Drift is measured geometrically: the simulated pose is projected back
    onto the path and the lateral offset, heading error and speed error at
    the projected arc length are tracked.  The known-constraint residuals
    are evaluated along the reference profile itself.  Passes iff lateral
    drift < 0.05 m and all residuals <= 0.
    """
    ch0 = path.channels(np.asarray([path.s_min]))
    state = np.array([ch0["x"][0], ch0["y"][0], ch0["heading"][0],
                      ch0["delta_ref"][0], ch0["alpha_ref"][0],
                      ch0["v_ref"][0], ch0["a_ref"][0]])
    drift_pos = 0.0
    drift_head = 0.0
    speed_err = 0.0
    worst_h = -np.inf
    worst_name = "none"

    for s_val in np.linspace(path.s_min, path.s_max, 200):
        c = path.channels(np.asarray([s_val]))
        xs = np.array([s_val, 0.0, 0.0, c["delta_ref"][0], c["alpha_ref"][0],
                       c["v_ref"][0], c["a_ref"][0]])
        us = np.array([c["a_req_ref"][0], c["delta_sp_ref"][0]])
        res = models.known_constraints(xs, us, p)
        i = int(np.argmax(res))
        if res[i] > worst_h:
            worst_h = float(res[i])
            worst_name = models.KNOWN_CONSTRAINT_NAMES[i]

    s_proj = path.s_min
    guard = 0
    max_steps = int(40.0 * (path.s_max - path.s_min)
                    / max(dt * self_min_speed(path), 1e-6))
    while s_proj < path.s_max - 2.0 and guard < max_steps:
        guard += 1
        c = path.channels(np.asarray([s_proj]))
        # sample the held input at the interval midpoint to avoid ZOH staleness
        s_mid = min(s_proj + 0.5 * dt * c["v_ref"][0], path.s_max)
        cm = path.channels(np.asarray([s_mid]))
        u = np.array([cm["a_req_ref"][0], cm["delta_sp_ref"][0]])
        state = models.rk4_global(state, u, dt, 5, p)
        err = global_to_frenet(path, GlobalState.from_array(state))
        s_proj = err.s
        drift_pos = max(drift_pos, abs(err.e_y))
        drift_head = max(drift_head, abs(err.e_psi))
        c2 = path.channels(np.asarray([s_proj]))
        speed_err = max(speed_err, abs(state[5] - c2["v_ref"][0]))
    passed = drift_pos < 0.05 and worst_h <= 1e-9
    return FeasibilityReport(passed, drift_pos, drift_head, speed_err,
                             worst_h, worst_name)


def self_min_speed(path: ReferencePath) -> float:
    return float(path._ch["v_ref"].min())
