"""Single-track vehicle dynamics in global and path-error coordinates.

The error-frame state is ordered [s, e_y, e_psi, delta, alpha, v, a] with
inputs [a_req, delta_sp].  All right-hand sides are vectorized over a
leading batch axis and can return exact Jacobians propagated through the
RK4 map, which is what the SQP linearization consumes.

Reference-path objects are duck-typed: they only need a
``channels(s_array)`` method returning the interpolated channel dict used
here (kappa, delta_ref and their slopes in s).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

NX = 7
NU = 2


class FrenetSingularError(Exception):
    """The projection 1 - kappa * e_y collapsed; the error frame is invalid."""


@dataclass(frozen=True)
class VehicleParams:
    """Actuator constants and box bounds for the known constraints h."""

    w0: float = 20.0            # 1/s, steering actuator natural frequency
    w1: float = 0.9             # steering actuator damping
    t_acc: float = 1.8          # 1/s, acceleration-tracking pole
    wheelbase_l: float = 2.98   # m
    e_y_max: float = 0.4        # m
    e_psi_max: float = 0.61     # rad
    delta_max: float = 0.53     # rad
    v_max: float = 15.28        # m/s
    a_min: float = -5.0         # m/s^2
    a_max: float = 2.0          # m/s^2
    alpha_max: float = 0.35     # rad/s

    def __post_init__(self):
        if self.w0 <= 0 or self.w1 <= 0 or self.t_acc <= 0 or self.wheelbase_l <= 0:
            raise ValueError("actuator constants must be positive")
        if not self.a_min < 0 < self.a_max:
            raise ValueError("need a_min < 0 < a_max")
        for name in ("e_y_max", "e_psi_max", "delta_max", "v_max", "alpha_max"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


@dataclass
class GlobalState:
    x: float
    y: float
    psi: float
    delta: float = 0.0
    alpha: float = 0.0
    v: float = 0.0
    a: float = 0.0

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.psi, self.delta,
                         self.alpha, self.v, self.a])

    @classmethod
    def from_array(cls, arr) -> "GlobalState":
        return cls(*map(float, arr))


@dataclass
class ErrorState:
    s: float
    e_y: float = 0.0
    e_psi: float = 0.0
    delta: float = 0.0
    alpha: float = 0.0
    v: float = 0.0
    a: float = 0.0

    def as_array(self) -> np.ndarray:
        return np.array([self.s, self.e_y, self.e_psi, self.delta,
                         self.alpha, self.v, self.a])

    @classmethod
    def from_array(cls, arr) -> "ErrorState":
        return cls(*map(float, arr))


@dataclass
class ControlInput:
    a_req: float = 0.0
    delta_sp: float = 0.0

    def as_array(self) -> np.ndarray:
        return np.array([self.a_req, self.delta_sp])


def error_rhs(x: np.ndarray, u: np.ndarray, ref, p: VehicleParams,
              with_jacobian: bool = False):
    """Continuous error-frame dynamics, batched over the leading axis.

    Returns f (..., 7) and, when requested, the exact Jacobians
    (d f / d x, d f / d u) with shapes (..., 7, 7) and (..., 7, 2).
    Raises ``FrenetSingularError`` when 1 - kappa * e_y <= 0 anywhere.
    """
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    squeeze = x.ndim == 1
    x = np.atleast_2d(x)
    u = np.atleast_2d(u)
    s, e_y, e_psi, delta, alpha, v, a = (x[..., i] for i in range(NX))
    a_req, delta_sp = u[..., 0], u[..., 1]

    ch = ref.channels(s)
    kappa, d_kappa = ch["kappa"], ch["d_kappa"]
    delta_r, d_delta_r = ch["delta_ref"], ch["d_delta_ref"]

    denom = 1.0 - kappa * e_y
    if (denom <= 1e-9).any():
        raise FrenetSingularError("1 - kappa * e_y <= 0")
    inv_l = 1.0 / p.wheelbase_l
    cos_ep, sin_ep = np.cos(e_psi), np.sin(e_psi)
    s_dot = v * cos_ep / denom
    tan_d, tan_dr = np.tan(delta), np.tan(delta_r)

    f = np.empty_like(x)
    f[..., 0] = s_dot
    f[..., 1] = v * sin_ep
    f[..., 2] = v * inv_l * tan_d - s_dot * inv_l * tan_dr
    f[..., 3] = alpha
    f[..., 4] = p.w0 ** 2 * (delta_sp - delta) - 2.0 * p.w0 * p.w1 * alpha
    f[..., 5] = a
    f[..., 6] = p.t_acc * (a_req - a)

    if not with_jacobian:
        return f[0] if squeeze else f

    n = x.shape[0]
    jx = np.zeros((n, NX, NX))
    ju = np.zeros((n, NX, NU))
    ds_ds = v * cos_ep * e_y * d_kappa / denom ** 2
    ds_dey = v * cos_ep * kappa / denom ** 2
    ds_dep = -v * sin_ep / denom
    ds_dv = cos_ep / denom
    sec2_dr = 1.0 + tan_dr ** 2

    jx[:, 0, 0] = ds_ds
    jx[:, 0, 1] = ds_dey
    jx[:, 0, 2] = ds_dep
    jx[:, 0, 5] = ds_dv
    jx[:, 1, 2] = v * cos_ep
    jx[:, 1, 5] = sin_ep
    jx[:, 2, 0] = -(ds_ds * tan_dr + s_dot * sec2_dr * d_delta_r) * inv_l
    jx[:, 2, 1] = -ds_dey * tan_dr * inv_l
    jx[:, 2, 2] = -ds_dep * tan_dr * inv_l
    jx[:, 2, 3] = v * inv_l * (1.0 + tan_d ** 2)
    jx[:, 2, 5] = (tan_d - ds_dv * tan_dr) * inv_l
    jx[:, 3, 4] = 1.0
    jx[:, 4, 3] = -p.w0 ** 2
    jx[:, 4, 4] = -2.0 * p.w0 * p.w1
    jx[:, 5, 6] = 1.0
    jx[:, 6, 6] = -p.t_acc
    ju[:, 4, 1] = p.w0 ** 2
    ju[:, 6, 0] = p.t_acc

    if squeeze:
        return f[0], jx[0], ju[0]
    return f, jx, ju


def error_dynamics(x: ErrorState, u: ControlInput, ref, p: VehicleParams) -> np.ndarray:
    """Time derivative of the error state, shape (7,)."""
    return error_rhs(x.as_array(), u.as_array(), ref, p)


def _clamp_braking(x: np.ndarray) -> None:
    """Stop the hybrid model at v = 0: braking never makes the car reverse."""
    neg = x[..., 5] < 0.0
    if np.any(neg):
        x[..., 5] = np.where(neg, 0.0, x[..., 5])
        x[..., 6] = np.where(neg, np.maximum(x[..., 6], 0.0), x[..., 6])


def rk4_step_array(x: np.ndarray, u: np.ndarray, dt: float, substeps: int,
                   ref, p: VehicleParams, clamp: bool = True) -> np.ndarray:
    """Classical RK4 over ``substeps`` sub-intervals, batched."""
    if dt <= 0 or substeps < 1:
        raise ValueError("need dt > 0 and substeps >= 1")
    h = dt / substeps
    x = np.array(x, dtype=float)
    for _ in range(substeps):
        k1 = error_rhs(x, u, ref, p)
        k2 = error_rhs(x + 0.5 * h * k1, u, ref, p)
        k3 = error_rhs(x + 0.5 * h * k2, u, ref, p)
        k4 = error_rhs(x + h * k3, u, ref, p)
        x = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if clamp:
            _clamp_braking(x)
    return x


def rk4_step(x: ErrorState, u: ControlInput, dt: float, substeps: int,
             ref, p: VehicleParams, clamp: bool = True) -> ErrorState:
    return ErrorState.from_array(
        rk4_step_array(x.as_array(), u.as_array(), dt, substeps, ref, p, clamp))


def rk4_sensitivities(x: np.ndarray, u: np.ndarray, dt: float, substeps: int,
                      ref, p: VehicleParams):
    """Discrete map F(x, u) with exact Jacobians, batched over stages.

    The Jacobians are propagated through the RK4 stages by the chain rule,
    on the smooth model (no braking clamp), which is what the OCP
    linearization needs.  Returns (x_next, A, B).
    """
    h = dt / substeps
    x = np.atleast_2d(np.asarray(x, dtype=float))
    u = np.atleast_2d(np.asarray(u, dtype=float))
    n = x.shape[0]
    a_tot = np.tile(np.eye(NX), (n, 1, 1))
    b_tot = np.zeros((n, NX, NU))
    eye = np.eye(NX)
    for _ in range(substeps):
        k1, j1x, j1u = error_rhs(x, u, ref, p, with_jacobian=True)
        x2 = x + 0.5 * h * k1
        k2, j2x, j2u = error_rhs(x2, u, ref, p, with_jacobian=True)
        d2x = j2x @ (eye + 0.5 * h * j1x)
        d2u = j2u + j2x @ (0.5 * h * j1u)
        x3 = x + 0.5 * h * k2
        k3, j3x, j3u = error_rhs(x3, u, ref, p, with_jacobian=True)
        d3x = j3x @ (eye + 0.5 * h * d2x)
        d3u = j3u + j3x @ (0.5 * h * d2u)
        x4 = x + h * k3
        k4, j4x, j4u = error_rhs(x4, u, ref, p, with_jacobian=True)
        d4x = j4x @ (eye + h * d3x)
        d4u = j4u + j4x @ (h * d3u)
        a_sub = eye + (h / 6.0) * (j1x + 2.0 * d2x + 2.0 * d3x + d4x)
        b_sub = (h / 6.0) * (j1u + 2.0 * d2u + 2.0 * d3u + d4u)
        x = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        a_tot = a_sub @ a_tot
        b_tot = a_sub @ b_tot + b_sub
    return x, a_tot, b_tot


def global_rhs(g: np.ndarray, u: np.ndarray, p: VehicleParams) -> np.ndarray:
    """Continuous dynamics in the global frame [x, y, psi, delta, alpha, v, a]."""
    g = np.asarray(g, dtype=float)
    squeeze = g.ndim == 1
    g = np.atleast_2d(g)
    u = np.atleast_2d(np.asarray(u, dtype=float))
    _, _, psi, delta, alpha, v, a = (g[..., i] for i in range(NX))
    f = np.empty_like(g)
    f[..., 0] = v * np.cos(psi)
    f[..., 1] = v * np.sin(psi)
    f[..., 2] = v / p.wheelbase_l * np.tan(delta)
    f[..., 3] = alpha
    f[..., 4] = p.w0 ** 2 * (u[..., 1] - delta) - 2.0 * p.w0 * p.w1 * alpha
    f[..., 5] = a
    f[..., 6] = p.t_acc * (u[..., 0] - a)
    return f[0] if squeeze else f


def rk4_global(g: np.ndarray, u: np.ndarray, dt: float, substeps: int,
               p: VehicleParams, clamp: bool = True) -> np.ndarray:
    """RK4 for the global model, same braking clamp as the error frame."""
    h = dt / substeps
    g = np.array(g, dtype=float)
    for _ in range(substeps):
        k1 = global_rhs(g, u, p)
        k2 = global_rhs(g + 0.5 * h * k1, u, p)
        k3 = global_rhs(g + 0.5 * h * k2, u, p)
        k4 = global_rhs(g + h * k3, u, p)
        g = g + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if clamp:
            _clamp_braking(g)
    return g


def steering_limit_bound(v) -> np.ndarray:
    """Velocity-dependent steering-wheel limit mapped to road-wheel angle."""
    return (1.0e4 / (1.0 + np.exp(0.5 * np.asarray(v, dtype=float))) + 40.0) \
        * 16.8 * np.pi / 180.0


KNOWN_CONSTRAINT_NAMES = (
    "e_y_upper", "e_y_lower", "e_psi_upper", "e_psi_lower",
    "delta_upper", "delta_lower", "alpha_upper", "alpha_lower",
    "v_upper", "v_lower", "a_upper", "a_lower",
    "a_req_upper", "a_req_lower", "delta_sp_upper", "delta_sp_lower",
    "steer_limit_upper", "steer_limit_lower",
)


def known_constraints(x: ErrorState | np.ndarray, u: ControlInput | np.ndarray,
                      p: VehicleParams, steering_limit: bool = False) -> np.ndarray:
    """Residual vector h(x, u); every entry <= 0 iff the box constraints hold.

    With ``steering_limit`` the experimental velocity-dependent steering
    bound is appended as two extra rows.
    """
    xa = x.as_array() if isinstance(x, ErrorState) else np.asarray(x, dtype=float)
    ua = u.as_array() if isinstance(u, ControlInput) else np.asarray(u, dtype=float)
    _, e_y, e_psi, delta, alpha, v, a = xa
    a_req, delta_sp = ua
    rows = [
        e_y - p.e_y_max, -e_y - p.e_y_max,
        e_psi - p.e_psi_max, -e_psi - p.e_psi_max,
        delta - p.delta_max, -delta - p.delta_max,
        alpha - p.alpha_max, -alpha - p.alpha_max,
        v - p.v_max, -v,
        a - p.a_max, p.a_min - a,
        a_req - p.a_max, p.a_min - a_req,
        delta_sp - p.delta_max, -delta_sp - p.delta_max,
    ]
    if steering_limit:
        bound = float(steering_limit_bound(v))
        rows += [delta - bound, -delta - bound]
    return np.array(rows)
