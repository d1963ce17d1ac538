"""Dense convex QP solver: primal-dual interior point, Mehrotra corrector.

    minimize    0.5 x' H x + f' x
    subject to  A_eq x = b_eq,   A_in x <= b_in

One factorization per iteration solves both the affine predictor and the
centering corrector.  Inputs may be numpy arrays or scipy.sparse matrices;
sparse inputs switch the KKT factorization to a sparse LU, which is what
the stage-structured optimal-control subproblems use.  Badly scaled costs
(such as large exact-penalty weights) are equilibrated internally and the
reported duals, objective, and KKT residuals refer to the original data.
The solver is deterministic and, given a warm start that already satisfies
the KKT conditions, returns it without iterating.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
MAX_ITERATIONS = "max_iterations"

_MIN_CURVATURE = 1e-8


class QpError(Exception):
    pass


@dataclass
class QpProblem:
    h: object                 # (n, n) symmetric PSD after regularization
    f: np.ndarray
    a_eq: object = None       # (m_eq, n)
    b_eq: np.ndarray | None = None
    a_in: object = None       # (m_in, n)
    b_in: np.ndarray | None = None

    def __post_init__(self):
        self.f = np.asarray(self.f, dtype=float).ravel()
        n = self.f.size
        if self.a_eq is None:
            self.a_eq = np.zeros((0, n))
            self.b_eq = np.zeros(0)
        if self.a_in is None:
            self.a_in = np.zeros((0, n))
            self.b_in = np.zeros(0)
        self.b_eq = np.asarray(self.b_eq, dtype=float).ravel()
        self.b_in = np.asarray(self.b_in, dtype=float).ravel()
        if self.a_eq.shape != (self.b_eq.size, n):
            raise ValueError("a_eq shape mismatch")
        if self.a_in.shape != (self.b_in.size, n):
            raise ValueError("a_in shape mismatch")
        if self.h.shape != (n, n):
            raise ValueError("h shape mismatch")

    @property
    def n(self) -> int:
        return self.f.size

    @property
    def is_sparse(self) -> bool:
        return any(sp.issparse(m) for m in (self.h, self.a_eq, self.a_in))


@dataclass
class QpSolution:
    status: str
    x: np.ndarray | None = None
    eq_duals: np.ndarray | None = None
    in_duals: np.ndarray | None = None
    slacks: np.ndarray | None = None
    objective: float = np.nan
    iterations: int = 0
    kkt_residual: float = np.inf
    certificate: np.ndarray | None = None


@dataclass
class WarmStart:
    x: np.ndarray
    eq_duals: np.ndarray | None = None
    in_duals: np.ndarray | None = None


def _regularized(h):
    """H + lambda I with lambda chosen so the minimum eigenvalue >= 1e-8."""
    if sp.issparse(h):
        return (h + _MIN_CURVATURE * sp.identity(h.shape[0], format="csc")).tocsc()
    h = np.asarray(h, dtype=float)
    h = 0.5 * (h + h.T)
    if h.shape[0] <= 400:
        lam = float(np.linalg.eigvalsh(h).min())
        shift = _MIN_CURVATURE - min(lam, 0.0)
    else:
        shift = _MIN_CURVATURE
    return h + shift * np.eye(h.shape[0])


class _KktSolver:
    """Factor [[H + A'WA, A_eq'], [A_eq, -delta I]] and back-solve."""

    def __init__(self, problem: QpProblem, h_scaled):
        self.p = problem
        self.h = h_scaled
        self.sparse = problem.is_sparse
        if self.sparse:
            self.a_eq = sp.csr_matrix(problem.a_eq)
            self.a_in = sp.csr_matrix(problem.a_in)
        else:
            self.a_eq = np.asarray(problem.a_eq, dtype=float)
            self.a_in = np.asarray(problem.a_in, dtype=float)

    def factor(self, w: np.ndarray, diag_shift: float = 0.0):
        n, m_eq = self.p.n, self.p.b_eq.size
        if self.sparse:
            if w.size:
                hw = self.h + self.a_in.T @ sp.diags(w) @ self.a_in
            else:
                hw = self.h
            if diag_shift:
                hw = hw + diag_shift * sp.identity(n, format="csc")
            if m_eq:
                kkt = sp.bmat([[hw, self.a_eq.T],
                               [self.a_eq, -1e-10 * sp.identity(m_eq)]],
                              format="csc")
            else:
                kkt = sp.csc_matrix(hw)
            self._mat = kkt
            self._solve = spla.splu(kkt, permc_spec="COLAMD").solve
        else:
            hw = self.h.copy()
            if w.size:
                hw += (self.a_in.T * w) @ self.a_in
            if diag_shift:
                hw = hw + diag_shift * np.eye(n)
            kkt = np.zeros((n + m_eq, n + m_eq))
            kkt[:n, :n] = hw
            if m_eq:
                kkt[:n, n:] = self.a_eq.T
                kkt[n:, :n] = self.a_eq
                kkt[n:, n:] = -1e-10 * np.eye(m_eq)
            self._mat = kkt
            lu = sla.lu_factor(kkt)
            self._solve = lambda rhs: sla.lu_solve(lu, rhs)

    def solve(self, rhs_x: np.ndarray, rhs_y: np.ndarray):
        n = self.p.n
        rhs = np.concatenate([rhs_x, rhs_y])
        out = self._solve(rhs)
        # one step of iterative refinement recovers digits lost to the
        # extreme diagonal spread near convergence
        resid = rhs - self._mat @ out
        if np.abs(resid).max(initial=0.0) > 1e-13 * max(1.0, np.abs(rhs).max()):
            out = out + self._solve(resid)
        return out[:n], out[n:]


def _residuals(p: QpProblem, h_scaled, f_scaled, x, y, z, t):
    r_d = h_scaled @ x + f_scaled
    if p.b_eq.size:
        r_d = r_d + p.a_eq.T @ y
    if p.b_in.size:
        r_d = r_d + p.a_in.T @ z
    r_eq = (p.a_eq @ x - p.b_eq) if p.b_eq.size else np.zeros(0)
    r_in = (p.a_in @ x + t - p.b_in) if p.b_in.size else np.zeros(0)
    comp = float(z @ t / max(t.size, 1)) if t.size else 0.0
    norm = max(np.abs(r_d).max(initial=0.0), np.abs(r_eq).max(initial=0.0),
               np.abs(r_in).max(initial=0.0), comp)
    return norm, r_d, r_eq, r_in


def qp_solve(problem: QpProblem, warm_start: WarmStart | None = None,
             tol: float = 1e-8, max_iter: int = 50) -> QpSolution:
    """Solve the QP; statuses are ``optimal``, ``infeasible``,
    ``max_iterations``.

    On ``optimal`` the KKT residuals (stationarity, primal feasibility,
    complementarity) are below ``tol`` in the infinity norm, measured on
    the cost-equilibrated problem: primal feasibility is absolute, while
    stationarity and complementarity are relative to the cost scale when
    the objective data exceed O(100).  For well-scaled problems the two
    measures coincide.  On ``infeasible`` the solution carries a
    normalized Farkas certificate (y, z) with A_eq' y + A_in' z ~ 0,
    z >= 0 and b' y + b_in' z < 0.
    """
    p = problem
    n, m_eq, m_in = p.n, p.b_eq.size, p.b_in.size
    h_reg = _regularized(p.h)

    # cost equilibration keeps the central path well conditioned when the
    # objective carries large penalty weights
    h_abs = np.abs(h_reg.data).max() if sp.issparse(h_reg) \
        else np.abs(h_reg).max(initial=0.0)
    scale = max(1.0, np.abs(p.f).max(initial=0.0) / 100.0, h_abs / 100.0)
    h_s = h_reg * (1.0 / scale)
    f_s = p.f / scale
    kkt = _KktSolver(p, h_s)

    def objective(x):
        # reported with the caller's H; shift and scaling are internal
        return float(0.5 * x @ (p.h @ x) + p.f @ x)

    def finish(status, x, y, z, t, iters):
        y_u = y * scale
        z_u = z * scale
        res, *_ = _residuals(p, h_s, f_s, x, y, z, t)
        return QpSolution(status, x, y_u, z_u, t, objective(x), iters, res)

    # equality-only (or unconstrained) problems need a single KKT solve
    if m_in == 0:
        kkt.factor(np.zeros(0))
        x, y = kkt.solve(-f_s, p.b_eq)
        sol = finish(OPTIMAL, x, y, np.zeros(0), np.zeros(0), 1)
        if sol.kkt_residual > max(tol, 1e-7):
            sol.status = MAX_ITERATIONS
        return sol


    # start point: warm start if given, otherwise a Mehrotra-style guess
    if warm_start is not None:
        x = np.asarray(warm_start.x, dtype=float).copy()
        y_u = (np.zeros(m_eq) if warm_start.eq_duals is None
               else np.asarray(warm_start.eq_duals, dtype=float).copy())
        z_u = (np.ones(m_in) if warm_start.in_duals is None
               else np.maximum(np.asarray(warm_start.in_duals, dtype=float),
                               1e-8))
        t = np.maximum(p.b_in - p.a_in @ x, 1e-8)
        res, *_ = _residuals(p, h_s, f_s, x, y_u / scale, z_u / scale, t)
        if res <= tol and np.abs(p.a_in @ x - p.b_in + t).max(initial=0.0) <= tol:
            return QpSolution(OPTIMAL, x, y_u, z_u, t, objective(x), 0, res)
        y = y_u / scale
        # push the warm point toward the central path before iterating
        z = np.maximum(z_u / scale, 1e-4)
        t = np.maximum(t, 1e-4)
    else:
        kkt.factor(np.zeros(0), diag_shift=1.0)
        x, y = kkt.solve(-f_s, p.b_eq)
        t_raw = p.b_in - p.a_in @ x
        shift = max(0.0, -float(t_raw.min(initial=0.0))) + 1.0
        t = t_raw + shift
        z = np.ones(m_in)

    t = np.maximum(t, 1e-10)
    z = np.maximum(z, 1e-10)
    best = None

    for it in range(1, max_iter + 1):
        res, r_d, r_eq, r_in = _residuals(p, h_s, f_s, x, y, z, t)
        mu = float(z @ t) / m_in
        if best is None or res < best[0]:
            best = (res, x.copy(), y.copy(), z.copy(), t.copy(), it - 1)
        if res <= tol:
            return finish(OPTIMAL, x, y, z, t, it - 1)

        # Farkas-style certificate check for primal infeasibility
        dual_scale = float(np.abs(y).max(initial=0.0) + np.abs(z).max(initial=0.0))
        if dual_scale > 1e8 / scale:
            cert = np.concatenate([y, z]) / dual_scale
            lhs = np.abs(p.a_eq.T @ cert[:m_eq] + p.a_in.T @ cert[m_eq:]).max() \
                if n else 0.0
            gap = float(p.b_eq @ cert[:m_eq] + p.b_in @ cert[m_eq:])
            if lhs <= 1e-6 and gap < -1e-10:
                return QpSolution(INFEASIBLE, certificate=cert,
                                  iterations=it, kkt_residual=res * scale)

        w = np.clip(z / t, 0.0, 1e14)
        kkt.factor(w)

        def direction(r_c):
            rhs_x = -(r_d + p.a_in.T @ ((z * r_in - r_c) / t))
            dx, dy = kkt.solve(rhs_x, -r_eq)
            dt = -r_in - p.a_in @ dx
            dz = (-r_c - z * dt) / t
            return dx, dy, dt, dz

        def max_step(v, dv):
            neg = dv < 0
            if not neg.any():
                return 1.0
            return float(min(1.0, (-v[neg] / dv[neg]).min()))

        # affine predictor
        dx_a, dy_a, dt_a, dz_a = direction(t * z)
        alpha_p = max_step(t, dt_a)
        alpha_d = max_step(z, dz_a)
        mu_aff = float((z + alpha_d * dz_a) @ (t + alpha_p * dt_a)) / m_in
        sigma = (max(mu_aff, 0.0) / mu) ** 3 if mu > 0 else 0.0

        # corrector reuses the factorization
        r_c = t * z + dt_a * dz_a - sigma * mu
        dx, dy, dt, dz = direction(r_c)
        alpha_p = 0.995 * max_step(t, dt)
        alpha_d = 0.995 * max_step(z, dz)
        # end-game safeguard: once near-converged, retreat from steps that
        # blow the residual up (the scaling spread exhausts double
        # precision there); never engaged while duals may legitimately
        # diverge toward an infeasibility certificate
        if best is not None and best[0] < 1e-2:
            for _ in range(8):
                x_n = x + alpha_p * dx
                t_n = np.maximum(t + alpha_p * dt, 1e-300)
                y_n = y + alpha_d * dy
                z_n = np.maximum(z + alpha_d * dz, 1e-300)
                res_n, *_ = _residuals(p, h_s, f_s, x_n, y_n, z_n, t_n)
                if res_n <= max(10.0 * res, res + 1.0):
                    break
                alpha_p *= 0.25
                alpha_d *= 0.25
            x, t, y, z = x_n, t_n, y_n, z_n
        else:
            x = x + alpha_p * dx
            t = np.maximum(t + alpha_p * dt, 1e-300)
            y = y + alpha_d * dy
            z = np.maximum(z + alpha_d * dz, 1e-300)

    res, *_ = _residuals(p, h_s, f_s, x, y, z, t)
    if best is not None and best[0] < res:
        _, x, y, z, t, _ = best
    return finish(MAX_ITERATIONS, x, y, z, t, max_iter)
