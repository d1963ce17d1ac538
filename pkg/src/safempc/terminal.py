"""Offline synthesis of the stabilizing terminal ingredients.

The longitudinal error subsystem (e_v, e_a) gets an LQR gain, the exact
discrete Lyapunov cost, and a maximal invariant polytope.  The lateral
subsystem is embedded in a 6-vertex polytopic family over the parameters
(nu_psi, nu_delta) = (v * eps_psi, v * eps_delta / l); a single gain from
the nominal vertex is certified on all vertices, a common quadratic cost
is found by an interior-point pass over the per-vertex decrease LMIs, and
the robust invariant set is intersected over all vertex closed loops.

Everything is deterministic; certificates are re-checkable from the JSON
artifact alone.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np
import scipy.linalg as sla

from . import geometry
from .geometry import HPolytope
from .models import ErrorState, VehicleParams
from .reference import RefSample


class NotStabilizableError(Exception):
    """Riccati iteration diverged: the pair (A, B) is not stabilizable."""


class InfeasibleCommonLyapunovError(Exception):
    """No common quadratic certificate found for the vertex family."""


def zoh_discretize(a_c: np.ndarray, b_c: np.ndarray, ts: float):
    """Zero-order-hold (A, B) via the augmented matrix exponential."""
    a_c = np.atleast_2d(np.asarray(a_c, dtype=float))
    b_c = np.atleast_2d(np.asarray(b_c, dtype=float))
    n, m = a_c.shape[0], b_c.shape[1]
    block = np.zeros((n + m, n + m))
    block[:n, :n] = a_c
    block[:n, n:] = b_c
    exp = sla.expm(block * ts)
    return exp[:n, :n], exp[:n, n:]


def lqr_gain(a: np.ndarray, b: np.ndarray, q: np.ndarray, r: np.ndarray,
             max_iter: int = 20_000, tol: float = 1e-13) -> np.ndarray:
    """Discrete LQR feedback from a fixed-point Riccati iteration.

    Returns K with u = -K x and A - B K Schur stable; raises
    ``NotStabilizableError`` when the iteration diverges or the closed
    loop fails the spectral-radius check.
    """
    a = np.atleast_2d(np.asarray(a, dtype=float))
    b = np.atleast_2d(np.asarray(b, dtype=float))
    q = np.atleast_2d(np.asarray(q, dtype=float))
    r = np.atleast_2d(np.asarray(r, dtype=float))
    p = q.copy()
    for _ in range(max_iter):
        btp = b.T @ p
        gain = np.linalg.solve(r + btp @ b, btp @ a)
        p_next = q + a.T @ p @ (a - b @ gain)
        p_next = 0.5 * (p_next + p_next.T)
        if not np.isfinite(p_next).all() or np.linalg.norm(p_next) > 1e14:
            raise NotStabilizableError("Riccati iteration diverged")
        if np.abs(p_next - p).max() <= tol * (1.0 + np.abs(p).max()):
            p = p_next
            break
        p = p_next
    else:
        raise NotStabilizableError("Riccati iteration did not converge")
    btp = b.T @ p
    gain = np.linalg.solve(r + btp @ b, btp @ a)
    rho = np.abs(np.linalg.eigvals(a - b @ gain)).max()
    if rho >= 1.0:
        raise NotStabilizableError(f"closed loop spectral radius {rho:.4f}")
    return gain


def solve_discrete_lyapunov(a_cl: np.ndarray, f: np.ndarray) -> np.ndarray:
    """P with A_cl' P A_cl - P = -F (the trace-minimal feasible point)."""
    p = sla.solve_discrete_lyapunov(np.asarray(a_cl).T, np.asarray(f))
    return 0.5 * (p + p.T)


def decrease_slack(p: np.ndarray, a_cl_list, f: np.ndarray) -> float:
    """min over vertices of lambda_min(P - A' P A - F); >= 0 certifies decrease."""
    slack = np.inf
    for a in a_cl_list:
        s = p - a.T @ p @ a - f
        slack = min(slack, float(np.linalg.eigvalsh(0.5 * (s + s.T)).min()))
    return slack


def _sym_basis(n: int) -> list[np.ndarray]:
    out = []
    for i in range(n):
        for j in range(i, n):
            e = np.zeros((n, n))
            e[i, j] = e[j, i] = 1.0
            out.append(e)
    return out


def lyapunov_terminal_cost(a_cl_list, f: np.ndarray,
                           eps: float = 1e-6) -> np.ndarray:
    """Common quadratic cost: P > 0 with A'PA - P <= -F for every vertex.

    A single map gets the exact discrete Lyapunov solution.  For a family,
    trace(P) is approximately minimized along the central path of a
    log-det barrier over the per-vertex decrease cones (a phase-I pass on
    a uniform slack first makes the start strictly feasible).  Raises
    ``InfeasibleCommonLyapunovError`` when no certificate is found.
    """
    a_cl_list = [np.atleast_2d(np.asarray(a, dtype=float)) for a in a_cl_list]
    f = np.atleast_2d(np.asarray(f, dtype=float))
    n = f.shape[0]
    if len(a_cl_list) == 1:
        return solve_discrete_lyapunov(a_cl_list[0], f)

    basis = _sym_basis(n)
    nb = len(basis)
    maps = [[e - a.T @ e @ a for e in basis] for a in a_cl_list]
    maps.append(basis)
    trace_vec = np.array([np.trace(e) for e in basis])

    def mat_of(p_vec):
        return sum(pk * ek for pk, ek in zip(p_vec, basis))

    def blocks(p_vec, shift):
        p_mat = mat_of(p_vec)
        out = [p_mat - a.T @ p_mat @ a - f + shift * np.eye(n)
               for a in a_cl_list]
        out.append(p_mat - eps * np.eye(n))
        return out

    def min_eig(p_vec, shift):
        return min(np.linalg.eigvalsh(b).min() for b in blocks(p_vec, shift))

    def newton(p_vec, shift, trace_weight, iters=60):
        for _ in range(iters):
            blks = blocks(p_vec, shift)
            if min(np.linalg.eigvalsh(b).min() for b in blks) <= 0:
                return p_vec, False
            invs = [np.linalg.inv(b) for b in blks]
            grad = trace_weight * trace_vec.copy()
            hess = np.zeros((nb, nb))
            for lin, inv in zip(maps, invs):
                scaled = [inv @ m for m in lin]
                grad -= np.array([np.trace(sm) for sm in scaled])
                for i in range(nb):
                    for j in range(i, nb):
                        hess[i, j] += np.trace(scaled[i] @ scaled[j])
                        hess[j, i] = hess[i, j]
            try:
                step = np.linalg.solve(hess + 1e-12 * np.eye(nb), -grad)
            except np.linalg.LinAlgError:
                return p_vec, False
            decrement = float(-grad @ step)
            scale = 1.0
            for _ in range(60):
                if min_eig(p_vec + scale * step, shift) > 0:
                    break
                scale *= 0.5
            else:
                return p_vec, False
            p_vec = p_vec + scale * step
            if decrement < 1e-10:
                break
        return p_vec, True

    # start from the first map's exact solution, shifted into feasibility
    p0 = solve_discrete_lyapunov(a_cl_list[0], f)
    p_vec = np.array([p0[i, j] for i in range(n) for j in range(i, n)])
    shift = max(0.0, 1e-3 - min_eig(p_vec, 0.0))
    while shift > 0.0:
        p_vec, ok = newton(p_vec, shift, trace_weight=0.0, iters=40)
        if not ok:
            raise InfeasibleCommonLyapunovError("phase-I centering failed")
        if min_eig(p_vec, 0.0) > 1e-9:
            break
        shift *= 0.5
        if shift < 1e-12:
            raise InfeasibleCommonLyapunovError("no strictly feasible point")
    for weight in (1e-2, 1e-1, 1.0, 10.0, 100.0, 1000.0):
        p_vec, ok = newton(p_vec, 0.0, trace_weight=weight)
        if not ok:
            break
    p_out = mat_of(p_vec)
    if decrease_slack(p_out, a_cl_list, f) < -1e-9:
        raise InfeasibleCommonLyapunovError("barrier result fails certification")
    return 0.5 * (p_out + p_out.T)


@dataclass(frozen=True)
class LateralEmbedding:
    beta_bar: float
    beta_dot_bar: float
    beta_ddot_bar: float
    eps_psi: tuple[float, float]
    eps_delta: tuple[float, float]
    e_delta_bar: float
    e_alpha_bar: float
    rho_bar: float
    v_range: tuple[float, float]


@dataclass(frozen=True)
class TerminalBounds:
    """State/reference bounds used only by the terminal synthesis."""

    e_y: float = 0.2
    e_psi: float = 0.1745
    delta: float = 0.5295
    alpha: float = 0.353
    delta_ref: float = 0.2079
    beta_dot: float = 0.2013
    beta_ddot: float = 5.9505
    v_low: float = 1.0
    v_high: float = 55.0 / 3.6
    v_ref_high: float = 50.0 / 3.6
    a_ref: float = 1.0
    a_req_ref: float = 1.05
    cut_sum: float = 1.4          # e_v + e_a <= cut_sum
    cut_combo: float = 32.0       # -cut_combo <= 2 e_v + e_a


def beta_bound(delta_ref_bar: float, e_y_bar: float, wheelbase: float) -> float:
    """Worst-case sideslip-like angle of the reference steering geometry."""
    t = np.tan(delta_ref_bar)
    return float(abs(np.arctan(t / (1.0 - e_y_bar * t / wheelbase))))


def wheelbase_from_beta(beta_bar: float, delta_ref_bar: float,
                        e_y_bar: float) -> float:
    """Invert ``beta_bound`` for the wheelbase (very sensitive to beta_bar)."""
    t = np.tan(delta_ref_bar)
    return float(e_y_bar * t / (1.0 - t / np.tan(beta_bar)))


def _convex_hull_2d(points: np.ndarray) -> np.ndarray:
    """Monotone-chain hull, counterclockwise, collinear points dropped."""
    pts = points[np.lexsort((points[:, 1], points[:, 0]))]

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    def half(seq):
        out = []
        for p in seq:
            while len(out) >= 2 and cross(out[-2], out[-1], p) <= 1e-12:
                out.pop()
            out.append(p)
        return out

    lower = half(pts)
    upper = half(pts[::-1])
    return np.array(lower[:-1] + upper[:-1])


def lateral_embedding(params: VehicleParams,
                      bounds: TerminalBounds = TerminalBounds(),
                      grid: float = 1e-3) -> tuple[LateralEmbedding, np.ndarray]:
    """Parameter bounds and the 6 polytopic vertices (nu_psi, nu_delta).

    eps_psi is sin(x)/x at the heading-error bound; eps_delta is gridded
    over the admissible (delta, beta) box; the 8 corner candidates of the
    (v, eps_psi, eps_delta) box are projected and hulled.
    """
    beta = beta_bound(bounds.delta_ref, bounds.e_y, params.wheelbase_l)
    eps_psi_lo = float(np.sin(bounds.e_psi) / bounds.e_psi)

    dg = np.arange(-bounds.delta, bounds.delta + grid / 2, grid)
    bg = np.arange(-beta, beta + grid / 2, grid)
    dd, bb = np.meshgrid(dg, bg, indexing="ij")
    num = np.tan(dd) - np.tan(bb)
    den = dd - bb
    mask = np.abs(den) > 1e-12
    ratios = num[mask] / den[mask]
    eps_delta_lo, eps_delta_hi = float(ratios.min()), float(ratios.max())

    emb = LateralEmbedding(
        beta_bar=beta,
        beta_dot_bar=bounds.beta_dot,
        beta_ddot_bar=bounds.beta_ddot,
        eps_psi=(eps_psi_lo, 1.0),
        eps_delta=(eps_delta_lo, eps_delta_hi),
        e_delta_bar=bounds.delta - beta,
        e_alpha_bar=bounds.alpha - bounds.beta_dot,
        rho_bar=(bounds.delta - beta - 2.0 * params.w1 / params.w0 * bounds.beta_dot
                 - bounds.beta_ddot / params.w0 ** 2),
        v_range=(bounds.v_low, bounds.v_high))

    corners = np.array([[v * e_psi, v * e_delta / params.wheelbase_l]
                        for v in emb.v_range
                        for e_psi in emb.eps_psi
                        for e_delta in emb.eps_delta])
    vertices = _convex_hull_2d(corners)
    return emb, vertices


def lateral_continuous(nu_psi: float, nu_delta: float, params: VehicleParams):
    """LPV lateral error dynamics in (e_y, e_psi, e_delta, e_alpha)."""
    a = np.array([[0.0, nu_psi, 0.0, 0.0],
                  [0.0, 0.0, nu_delta, 0.0],
                  [0.0, 0.0, 0.0, 1.0],
                  [0.0, 0.0, -params.w0 ** 2, -2.0 * params.w0 * params.w1]])
    b = np.array([[0.0], [0.0], [0.0], [params.w0 ** 2]])
    return a, b


def longitudinal_continuous(params: VehicleParams):
    a = np.array([[0.0, 1.0], [0.0, -params.t_acc]])
    b = np.array([[0.0], [params.t_acc]])
    return a, b


@dataclass(frozen=True)
class TerminalTuning:
    """LQR and cost weights; the cost blocks mirror the tracking cost."""

    q_lqr_lon: tuple = (5e-3, 1.0)
    r_lqr_lon: float = 1.0
    q_cost_lon: tuple = (1.0, 1.0)
    r_cost_lon: float = 4.0
    q_lqr_lat: tuple = (1.0, 500.0, 1.0, 0.1)
    r_lqr_lat: float = 1e-4
    q_cost_lat: tuple = (1.0, 1.0, 10.0, 1.0)
    r_cost_lat: float = 10.0
    nominal_vertex: tuple = (13.89, 4.79)
    ts: float = 0.05


@dataclass
class TerminalIngredients:
    k_lon: np.ndarray
    p_lon: np.ndarray
    x_lon: HPolytope
    k_lat: np.ndarray
    p_lat: np.ndarray
    x_lat: HPolytope
    vertices: np.ndarray
    embedding: LateralEmbedding
    a_lon_cl: np.ndarray
    a_lat_cl: np.ndarray       # (6, 4, 4)
    f_lon: np.ndarray
    f_lat: np.ndarray
    ts: float

    def __post_init__(self):
        for name in ("p_lon", "p_lat"):
            mat = getattr(self, name)
            if np.linalg.eigvalsh(mat).min() <= 0:
                raise ValueError(f"{name} must be positive definite")

    def terminal_cost_matrix(self) -> np.ndarray:
        """blockdiag(P_lat, P_lon) in state order (e_y, e_psi, delta, alpha, v, a)."""
        p = np.zeros((6, 6))
        p[:4, :4] = self.p_lat
        p[4:, 4:] = self.p_lon
        return p


def longitudinal_error_box(bounds: TerminalBounds, k_lon: np.ndarray,
                           a_bounds: tuple[float, float]) -> HPolytope:
    """Admissible (e_v, e_a) set: state boxes, feedback input rows, cuts.

    e_v has no direct lower bound (the stopped vehicle lives on that open
    face); the combination cut keeps the set bounded.
    """
    a_lo, a_hi = a_bounds
    e_v_hi = bounds.v_high - bounds.v_ref_high
    e_a_lo, e_a_hi = a_lo + bounds.a_ref, a_hi - bounds.a_ref
    e_req_lo, e_req_hi = a_lo + bounds.a_req_ref, a_hi - bounds.a_req_ref
    k = np.asarray(k_lon, dtype=float).ravel()
    normals = np.array([
        [1.0, 0.0],
        [0.0, 1.0],
        [0.0, -1.0],
        [-k[0], -k[1]],
        [k[0], k[1]],
        [1.0, 1.0],
        [-2.0, -1.0],
    ])
    offsets = np.array([e_v_hi, e_a_hi, -e_a_lo, e_req_hi, -e_req_lo,
                        bounds.cut_sum, bounds.cut_combo])
    return HPolytope(normals, offsets)


def lateral_error_box(bounds: TerminalBounds, emb: LateralEmbedding,
                      k_lat: np.ndarray) -> HPolytope:
    k = np.asarray(k_lat, dtype=float).ravel()
    eye = np.eye(4)
    normals = np.vstack([eye, -eye, -k[None, :], k[None, :]])
    offsets = np.hstack([
        bounds.e_y, bounds.e_psi, emb.e_delta_bar, emb.e_alpha_bar,
        bounds.e_y, bounds.e_psi, emb.e_delta_bar, emb.e_alpha_bar,
        emb.rho_bar, emb.rho_bar])
    return HPolytope(normals, offsets)


def build_longitudinal_set(params: VehicleParams, tuning: TerminalTuning,
                           bounds: TerminalBounds = TerminalBounds(),
                           max_iter: int = 200):
    a, b = zoh_discretize(*longitudinal_continuous(params), tuning.ts)
    k = lqr_gain(a, b, np.diag(tuning.q_lqr_lon), [[tuning.r_lqr_lon]])
    a_cl = a - b @ k
    box = longitudinal_error_box(bounds, k, (params.a_min, params.a_max))
    inv = geometry.max_invariant_set([a_cl], box, max_iter=max_iter)
    return k, a_cl, inv


def build_lateral_set(params: VehicleParams, tuning: TerminalTuning,
                      bounds: TerminalBounds = TerminalBounds(),
                      max_iter: int = 200):
    emb, vertices = lateral_embedding(params, bounds)
    a_n, b_n = zoh_discretize(*lateral_continuous(*tuning.nominal_vertex, params),
                              tuning.ts)
    k = lqr_gain(a_n, b_n, np.diag(tuning.q_lqr_lat), [[tuning.r_lqr_lat]])
    a_cls = []
    for nu in vertices:
        a_v, b_v = zoh_discretize(*lateral_continuous(nu[0], nu[1], params),
                                  tuning.ts)
        a_cl = a_v - b_v @ k
        rho = np.abs(np.linalg.eigvals(a_cl)).max()
        if rho >= 1.0:
            raise NotStabilizableError(
                f"gain unstable at vertex {nu}: spectral radius {rho:.4f}")
        a_cls.append(a_cl)
    box = lateral_error_box(bounds, emb, k)
    inv = geometry.max_invariant_set(a_cls, box, max_iter=max_iter)
    return emb, vertices, k, np.array(a_cls), inv


def synthesize(params: VehicleParams,
               tuning: TerminalTuning = TerminalTuning(),
               bounds: TerminalBounds = TerminalBounds()) -> TerminalIngredients:
    """Full offline pipeline: gains, costs, invariant sets, embedding."""
    k_lon, a_lon_cl, x_lon = build_longitudinal_set(params, tuning, bounds)
    f_lon = np.diag(tuning.q_cost_lon) + k_lon.T * tuning.r_cost_lon @ k_lon
    p_lon = lyapunov_terminal_cost([a_lon_cl], f_lon)

    emb, vertices, k_lat, a_lat_cl, x_lat = build_lateral_set(params, tuning, bounds)
    f_lat = np.diag(tuning.q_cost_lat) + k_lat.T * tuning.r_cost_lat @ k_lat
    p_lat = lyapunov_terminal_cost(list(a_lat_cl), f_lat)

    return TerminalIngredients(
        k_lon=k_lon, p_lon=p_lon, x_lon=x_lon,
        k_lat=k_lat, p_lat=p_lat, x_lat=x_lat,
        vertices=vertices, embedding=emb,
        a_lon_cl=a_lon_cl, a_lat_cl=a_lat_cl,
        f_lon=f_lon, f_lat=f_lat, ts=tuning.ts)


def terminal_membership(x: ErrorState, ref: RefSample,
                        ing: TerminalIngredients, tol: float = 1e-9):
    """Membership in the stabilizing terminal set around the reference.

    Longitudinal coordinates are (v - v_ref, a - a_ref) intersected with
    v >= 0; lateral coordinates are (e_y, e_psi, delta - delta_ref,
    alpha - alpha_ref).  Returns (member, lon_residuals, lat_residuals).
    """
    e_lon = np.array([x.v - ref.v_ref, x.a - ref.a_ref])
    e_lat = np.array([x.e_y, x.e_psi, x.delta - ref.delta_ref,
                      x.alpha - ref.alpha_ref])
    lon_res = ing.x_lon.normals @ e_lon - ing.x_lon.offsets
    lat_res = ing.x_lat.normals @ e_lat - ing.x_lat.offsets
    member = (lon_res.max() <= tol and lat_res.max() <= tol and x.v >= -tol)
    return member, lon_res, lat_res


def safe_set_constraints(ing: TerminalIngredients, ref: RefSample):
    """Safe-stage rows over z = [s, e_y, e_psi, delta, alpha, v, a, a_req, delta_sp].

    Equalities pin the vehicle at a full stop (v = a = alpha = 0 and
    a_req = 0); inequalities keep the lateral error inside the terminal
    set.  Avoidance rows are dropped by convention at this stage: a
    stopped vehicle is never the one closing the gap.
    """
    n_z = 9
    a_eq = np.zeros((4, n_z))
    a_eq[0, 5] = 1.0   # v
    a_eq[1, 6] = 1.0   # a
    a_eq[2, 4] = 1.0   # alpha
    a_eq[3, 7] = 1.0   # a_req
    b_eq = np.zeros(4)
    n_lat = ing.x_lat.num_rows
    a_in = np.zeros((n_lat, n_z))
    a_in[:, 1] = ing.x_lat.normals[:, 0]
    a_in[:, 2] = ing.x_lat.normals[:, 1]
    a_in[:, 3] = ing.x_lat.normals[:, 2]
    a_in[:, 4] = ing.x_lat.normals[:, 3]
    b_in = ing.x_lat.offsets + ing.x_lat.normals[:, 2] * ref.delta_ref \
        + ing.x_lat.normals[:, 3] * ref.alpha_ref
    return a_eq, b_eq, a_in, b_in


def verify_certificates(ing: TerminalIngredients,
                        synth_tol: float = 1e-7) -> dict[str, dict]:
    """Fast certificate suite (no Monte Carlo): Lyapunov decrease,
    invariance by support-function domination, positive definiteness,
    origin membership, block-diagonal assembly."""
    out = {}

    def record(name, value, passed):
        out[name] = {"value": float(value), "passed": bool(passed)}

    record("p_lon_min_eig", np.linalg.eigvalsh(ing.p_lon).min(),
           np.linalg.eigvalsh(ing.p_lon).min() > 0)
    record("p_lat_min_eig", np.linalg.eigvalsh(ing.p_lat).min(),
           np.linalg.eigvalsh(ing.p_lat).min() > 0)
    s_lon = decrease_slack(ing.p_lon, [ing.a_lon_cl], ing.f_lon)
    record("lyapunov_lon_slack", s_lon, s_lon >= -synth_tol)
    s_lat = decrease_slack(ing.p_lat, list(ing.a_lat_cl), ing.f_lat)
    record("lyapunov_lat_slack", s_lat, s_lat >= -synth_tol)
    inv_lon = geometry.invariance_certificate(ing.x_lon, [ing.a_lon_cl])
    record("invariance_lon", float(inv_lon), inv_lon)
    inv_lat = geometry.invariance_certificate(ing.x_lat, list(ing.a_lat_cl))
    record("invariance_lat", float(inv_lat), inv_lat)
    org_lon = geometry.contains(ing.x_lon, np.zeros(2))
    org_lat = geometry.contains(ing.x_lat, np.zeros(4))
    record("origin_member", float(org_lon and org_lat), org_lon and org_lat)
    p_full = ing.terminal_cost_matrix()
    cross = np.abs(p_full[:4, 4:]).max()
    record("blockdiag_cross_terms", cross, cross == 0.0)
    return out


def verify_literal_cost(p: np.ndarray, a_cl_list, f: np.ndarray,
                        rel_tol: float = 1e-2) -> dict:
    """Decrease check for externally supplied (rounded) cost matrices.

    The eigenvalue slack is normalized by ||F||_2 so the tolerance is
    scale-free; published values rounded to two decimals cannot meet an
    absolute slack at the magnitudes involved here.
    """
    slack = decrease_slack(np.asarray(p, dtype=float), a_cl_list, f)
    scale = max(1.0, float(np.linalg.norm(np.asarray(f), 2)))
    return {"slack": float(slack), "normalized_slack": float(slack / scale),
            "passed": bool(slack / scale >= -rel_tol)}


def monte_carlo_invariance(poly: HPolytope, a_cl_list, steps: int,
                           samples: int, rng: np.random.Generator,
                           switching: bool = False) -> int:
    """Count of escaped samples after propagating members through the maps."""
    pts = geometry.sample(poly, samples, rng)
    maps = [np.asarray(a) for a in a_cl_list]
    escapes = 0
    for _ in range(steps):
        if switching and len(maps) > 1:
            pick = rng.integers(0, len(maps), size=pts.shape[0])
            nxt = np.empty_like(pts)
            for i, a in enumerate(maps):
                sel = pick == i
                nxt[sel] = pts[sel] @ a.T
            pts = nxt
        else:
            pts = pts @ maps[0].T
        escapes += int((~geometry.contains_many(poly, pts, tol=1e-9)).sum())
    return escapes


def ingredients_to_json(ing: TerminalIngredients,
                        certificates: dict | None = None) -> str:
    payload = {
        "ts": ing.ts,
        "k_lon": ing.k_lon.tolist(),
        "p_lon": ing.p_lon.tolist(),
        "x_lon": {"normals": ing.x_lon.normals.tolist(),
                  "offsets": ing.x_lon.offsets.tolist()},
        "k_lat": ing.k_lat.tolist(),
        "p_lat": ing.p_lat.tolist(),
        "x_lat": {"normals": ing.x_lat.normals.tolist(),
                  "offsets": ing.x_lat.offsets.tolist()},
        "vertices": ing.vertices.tolist(),
        "embedding": asdict(ing.embedding),
        "a_lon_cl": ing.a_lon_cl.tolist(),
        "a_lat_cl": ing.a_lat_cl.tolist(),
        "f_lon": ing.f_lon.tolist(),
        "f_lat": ing.f_lat.tolist(),
        "certificates": certificates or {},
    }
    return json.dumps(payload, indent=1)


def ingredients_from_json(text: str) -> tuple[TerminalIngredients, dict]:
    data = json.loads(text)
    emb = data["embedding"]
    for key in ("eps_psi", "eps_delta", "v_range"):
        emb[key] = tuple(emb[key])
    ing = TerminalIngredients(
        k_lon=np.array(data["k_lon"]),
        p_lon=np.array(data["p_lon"]),
        x_lon=HPolytope(np.array(data["x_lon"]["normals"]),
                        np.array(data["x_lon"]["offsets"])),
        k_lat=np.array(data["k_lat"]),
        p_lat=np.array(data["p_lat"]),
        x_lat=HPolytope(np.array(data["x_lat"]["normals"]),
                        np.array(data["x_lat"]["offsets"])),
        vertices=np.array(data["vertices"]),
        embedding=LateralEmbedding(**emb),
        a_lon_cl=np.array(data["a_lon_cl"]),
        a_lat_cl=np.array(data["a_lat_cl"]),
        f_lon=np.array(data["f_lon"]),
        f_lat=np.array(data["f_lat"]),
        ts=float(data["ts"]))
    return ing, data.get("certificates", {})
