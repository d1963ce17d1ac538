"""Multiple-shooting transcription and SQP real-time iteration.

One optimal-control problem is transcribed per yield/pass configuration:
tracking cost over the first N stages, terminal cost at N, hard
stabilizing-set rows on stages N..M-1, a full-stop safe stage at M, hard
known-constraint rows, and collision-avoidance rows softened by L1 slack
penalties (exact penalty: the weight dominates any dual seen in practice,
so zero-slack solutions coincide with the hard-constrained optimum).

Variables are ordered stage-wise ([x_0, u_0, x_1, u_1, ..., x_M], slacks
last), which keeps the KKT system block-banded; the QP solver's sparse
path factors it in near-linear time.  Each RTI step performs a single
linearize-solve-shift cycle and is deterministic.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import models, qp
from .constraints import PASS, YIELD, ObstacleIntervals, YieldConfiguration
from .models import ErrorState, VehicleParams
from .reference import ReferencePath
from .terminal import TerminalIngredients

NX = 7
NU = 2


class AllConfigurationsFailedError(Exception):
    pass


class DivergedError(Exception):
    pass


@dataclass(frozen=True)
class OcpConfig:
    horizon_n: int = 20
    horizon_m: int = 100
    ts: float = 0.05
    q_diag: tuple = (1.0, 1.0, 10.0, 1.0, 1.0, 1.0)   # e_y, e_psi, delta, alpha, v, a
    r_diag: tuple = (4.0, 10.0)                        # a_req, delta_sp
    rho_penalty: float = 1e4
    rk4_substeps: int = 5
    steering_limit: bool = False

    def __post_init__(self):
        if not 1 <= self.horizon_n <= self.horizon_m:
            raise ValueError("need 1 <= N <= M")
        if min(self.q_diag) <= 0 or min(self.r_diag) <= 0 or self.rho_penalty <= 0:
            raise ValueError("weights must be positive")


@dataclass
class OcpSolution:
    config_id: str
    states: np.ndarray            # (M+1, 7)
    inputs: np.ndarray            # (M, 2)
    slacks: np.ndarray            # (n_slack,)
    slack_pairs: list
    cost: float
    kkt_residual: float
    solve_time: float
    status: str
    degraded: bool
    qp_iterations: int

    @property
    def max_slack(self) -> float:
        return float(self.slacks.max(initial=0.0))

    @property
    def first_input(self) -> np.ndarray:
        return self.inputs[0]


@dataclass
class TranscriptionMeta:
    n_vars: int
    n_core: int
    slack_pairs: list
    cost_offset: float = 0.0

    def x_slice(self, n):
        return slice(9 * n, 9 * n + NX)

    def u_slice(self, n):
        return slice(9 * n + NX, 9 * n + 9)

    def extract(self, vec):
        m = (self.n_core - NX) // 9
        states = np.empty((m + 1, NX))
        inputs = np.empty((m, NU))
        for n in range(m):
            states[n] = vec[self.x_slice(n)]
            inputs[n] = vec[self.u_slice(n)]
        states[m] = vec[self.x_slice(m)]
        slacks = vec[self.n_core:]
        return states, inputs, slacks


_H_STATE_ROWS = ((1, 1.0), (1, -1.0), (2, 1.0), (2, -1.0), (3, 1.0), (3, -1.0),
                 (4, 1.0), (4, -1.0), (5, 1.0), (5, -1.0), (6, 1.0), (6, -1.0))


def _h_bounds(p: VehicleParams):
    return np.array([p.e_y_max, p.e_y_max, p.e_psi_max, p.e_psi_max,
                     p.delta_max, p.delta_max, p.alpha_max, p.alpha_max,
                     p.v_max, 0.0, p.a_max, -p.a_min])


def transcribe(x0: np.ndarray, iterate_states: np.ndarray,
               iterate_inputs: np.ndarray, path: ReferencePath,
               vehicle: VehicleParams, cfg: OcpConfig,
               ingredients: TerminalIngredients,
               tables: dict[str, ObstacleIntervals],
               config: YieldConfiguration,
               soft_avoidance: bool = True):
    """Build the sparse QP for one configuration around the given iterate.

    Returns (QpProblem, TranscriptionMeta).  Avoidance rows cover stages
    0..M-1 where the obstacle's window is nonempty; stage-0 state box rows
    are omitted because the initial state is pinned by an equality.
    """
    m_hor, n_hor = cfg.horizon_m, cfg.horizon_n
    xs = np.asarray(iterate_states, dtype=float)
    us = np.asarray(iterate_inputs, dtype=float)
    if xs.shape != (m_hor + 1, NX) or us.shape != (m_hor, NU):
        raise ValueError("iterate dimensions do not match the horizon")

    slack_pairs = []
    if soft_avoidance:
        for oid in sorted(tables):
            tab = tables[oid]
            for n in range(m_hor):
                if n < tab.empty.size and not tab.empty[n]:
                    slack_pairs.append((oid, n))
    n_core = 9 * m_hor + NX
    n_vars = n_core + len(slack_pairs)
    meta = TranscriptionMeta(n_vars, n_core, slack_pairs)

    xn, a_batch, b_batch = models.rk4_sensitivities(
        xs[:m_hor], us, cfg.ts, cfg.rk4_substeps, path, vehicle)
    ch = path.channels(xs[:, 0])

    # ----- cost (batched over the costed stages) -----
    w8 = np.diag(np.concatenate([cfg.q_diag, cfg.r_diag]))
    ref_rows = np.column_stack([
        np.zeros((m_hor + 1, 2)), ch["delta_ref"], ch["alpha_ref"],
        ch["v_ref"], ch["a_ref"], ch["a_req_ref"], ch["delta_sp_ref"]])
    slope_rows = np.column_stack([
        np.zeros((m_hor + 1, 2)), ch["d_delta_ref"], ch["d_alpha_ref"],
        ch["d_v_ref"], ch["d_a_ref"], ch["d_a_req_ref"], ch["d_delta_sp_ref"]])
    sel = np.zeros((8, 9))
    sel[np.arange(6), np.arange(1, 7)] = 1.0
    sel[6, 7] = 1.0
    sel[7, 8] = 1.0
    c_stack = np.broadcast_to(sel, (n_hor, 8, 9)).copy()
    c_stack[:, :, 0] = -slope_rows[:n_hor]
    d_stack = slope_rows[:n_hor] * xs[:n_hor, 0:1] - ref_rows[:n_hor]
    wc = np.einsum("ij,njk->nik", w8, c_stack)
    h_blocks = 2.0 * np.einsum("nji,njk->nik", c_stack, wc)
    f = np.zeros(n_vars)
    f_blocks = 2.0 * np.einsum("nji,jk,nk->ni", c_stack, w8, d_stack)
    cost_offset = float(np.einsum("ni,ij,nj->", d_stack, w8, d_stack))
    base9 = 9 * np.arange(n_hor)[:, None, None]
    h_rows = (base9 + np.arange(9)[None, :, None]
              + np.zeros((1, 1, 9), dtype=int)).ravel()
    h_cols = (base9 + np.zeros((1, 9, 1), dtype=int)
              + np.arange(9)[None, None, :]).ravel()
    h_vals = h_blocks.ravel()
    f[:9 * n_hor].reshape(n_hor, 9)[:] = f_blocks

    p6 = ingredients.terminal_cost_matrix()
    c_term = np.zeros((6, NX))
    c_term[:, 1:] = np.eye(6)
    c_term[:, 0] = -slope_rows[n_hor, :6]
    d_term = slope_rows[n_hor, :6] * xs[n_hor, 0] - ref_rows[n_hor, :6]
    h_blk = 2.0 * c_term.T @ p6 @ c_term
    base = 9 * n_hor
    idx = np.arange(base, base + NX)
    h_rows = np.concatenate([h_rows, np.repeat(idx, NX)])
    h_cols = np.concatenate([h_cols, np.tile(idx, NX)])
    h_vals = np.concatenate([h_vals, h_blk.ravel()])
    f[base:base + NX] += 2.0 * c_term.T @ p6 @ d_term
    cost_offset += float(d_term @ p6 @ d_term)
    if slack_pairs:
        f[n_core:] = cfg.rho_penalty
    h_mat = sp.csc_matrix((h_vals, (h_rows, h_cols)), shape=(n_vars, n_vars))

    # ----- equalities: init, dynamics, safe stage -----
    resid = xn - np.einsum("nij,nj->ni", a_batch, xs[:m_hor]) \
        - np.einsum("nij,nj->ni", b_batch, us)
    dyn_rows = (NX + NX * np.arange(m_hor)[:, None, None]
                + np.arange(NX)[None, :, None]
                + np.zeros((1, 1, 10), dtype=int)).ravel()
    col_block = np.empty((m_hor, NX, 10), dtype=int)
    col_block[:, :, :NX] = (9 * np.arange(m_hor)[:, None, None]
                            + np.arange(NX)[None, None, :])
    col_block[:, :, NX] = (9 * np.arange(m_hor) + NX)[:, None]
    col_block[:, :, NX + 1] = (9 * np.arange(m_hor) + NX + 1)[:, None]
    col_block[:, :, NX + 2] = (9 * (np.arange(m_hor) + 1))[:, None] \
        + np.arange(NX)[None, :]
    dyn_vals = np.concatenate([-a_batch, -b_batch,
                               np.ones((m_hor, NX, 1))], axis=2).ravel()
    rows = np.concatenate([np.arange(NX), dyn_rows,
                           NX + NX * m_hor + np.arange(4)])
    cols = np.concatenate([np.arange(NX), col_block.ravel(),
                           [9 * m_hor + 5, 9 * m_hor + 6, 9 * m_hor + 4,
                            9 * (m_hor - 1) + NX]])
    vals = np.concatenate([np.ones(NX), dyn_vals, np.ones(4)])
    b_eq = np.concatenate([x0, resid.ravel(), np.zeros(4)])
    a_eq = sp.csr_matrix((vals, (rows, cols)),
                         shape=(NX + NX * m_hor + 4, n_vars))

    # ----- inequalities -----
    blocks_r, blocks_c, blocks_v, blocks_b = [], [], [], []
    row = 0

    def add_block(r, c, v, b):
        nonlocal row
        blocks_r.append(np.asarray(r, dtype=int) + row)
        blocks_c.append(np.asarray(c, dtype=int))
        blocks_v.append(np.asarray(v, dtype=float))
        b_arr = np.asarray(b, dtype=float)
        blocks_b.append(b_arr)
        row += b_arr.size

    h_b = _h_bounds(vehicle)
    comps = np.array([c for c, _ in _H_STATE_ROWS])
    signs = np.array([s for _, s in _H_STATE_ROWS])
    n_states = np.arange(1, m_hor)
    add_block(np.arange(n_states.size * 12),
              (9 * n_states[:, None] + comps[None, :]).ravel(),
              np.tile(signs, n_states.size),
              np.tile(h_b, n_states.size))
    n_inputs = np.arange(m_hor)
    u_comps = np.array([0, 0, 1, 1])
    u_signs = np.array([1.0, -1.0, 1.0, -1.0])
    u_bounds = np.array([vehicle.a_max, -vehicle.a_min,
                         vehicle.delta_max, vehicle.delta_max])
    add_block(np.arange(m_hor * 4),
              (9 * n_inputs[:, None] + NX + u_comps[None, :]).ravel(),
              np.tile(u_signs, m_hor),
              np.tile(u_bounds, m_hor))
    if cfg.steering_limit:
        v_bar = xs[1:m_hor, 5]
        bnd = models.steering_limit_bound(v_bar)
        e_half = np.exp(0.5 * v_bar)
        dbnd = -0.5e4 * e_half / (1 + e_half) ** 2 * 16.8 * np.pi / 180.0
        stages = np.arange(1, m_hor)
        for sign in (1.0, -1.0):
            add_block(np.repeat(np.arange(stages.size), 2),
                      np.column_stack([9 * stages + 3, 9 * stages + 5]).ravel(),
                      np.column_stack([np.full(stages.size, sign),
                                       -dbnd]).ravel(),
                      bnd - dbnd * v_bar)

    # stabilizing-set rows on stages N..M-1, safe-stage lateral rows at M
    lon_n = ingredients.x_lon.normals
    lon_b = ingredients.x_lon.offsets
    lat_n = ingredients.x_lat.normals
    lat_b = ingredients.x_lat.offsets
    t_stages = np.arange(n_hor, m_hor)
    if t_stages.size:
        s_bar = xs[t_stages, 0]
        dv, da = ch["d_v_ref"][t_stages], ch["d_a_ref"][t_stages]
        v0 = ch["v_ref"][t_stages] - dv * s_bar
        a0 = ch["a_ref"][t_stages] - da * s_bar
        n_lon = lon_n.shape[0]
        s_coef = -(np.outer(dv, lon_n[:, 0]) + np.outer(da, lon_n[:, 1]))
        cols_lon = np.stack([
            np.broadcast_to(9 * t_stages[:, None], (t_stages.size, n_lon)),
            np.broadcast_to(9 * t_stages[:, None] + 5, (t_stages.size, n_lon)),
            np.broadcast_to(9 * t_stages[:, None] + 6, (t_stages.size, n_lon)),
        ], axis=2)
        vals_lon = np.stack([
            s_coef,
            np.broadcast_to(lon_n[:, 0], (t_stages.size, n_lon)),
            np.broadcast_to(lon_n[:, 1], (t_stages.size, n_lon)),
        ], axis=2)
        b_lon = (lon_b[None, :] + np.outer(v0, lon_n[:, 0])
                 + np.outer(a0, lon_n[:, 1]))
        add_block(np.repeat(np.arange(t_stages.size * n_lon), 3),
                  cols_lon.ravel(), vals_lon.ravel(), b_lon.ravel())
    l_stages = np.arange(n_hor, m_hor + 1)
    s_bar = xs[l_stages, 0]
    dd, dal = ch["d_delta_ref"][l_stages], ch["d_alpha_ref"][l_stages]
    d0 = ch["delta_ref"][l_stages] - dd * s_bar
    al0 = ch["alpha_ref"][l_stages] - dal * s_bar
    n_lat = lat_n.shape[0]
    s_coef = -(np.outer(dd, lat_n[:, 2]) + np.outer(dal, lat_n[:, 3]))
    cols_lat = np.stack([
        np.broadcast_to(9 * l_stages[:, None], (l_stages.size, n_lat)),
        np.broadcast_to(9 * l_stages[:, None] + 1, (l_stages.size, n_lat)),
        np.broadcast_to(9 * l_stages[:, None] + 2, (l_stages.size, n_lat)),
        np.broadcast_to(9 * l_stages[:, None] + 3, (l_stages.size, n_lat)),
        np.broadcast_to(9 * l_stages[:, None] + 4, (l_stages.size, n_lat)),
    ], axis=2)
    vals_lat = np.stack([
        s_coef,
        np.broadcast_to(lat_n[:, 0], (l_stages.size, n_lat)),
        np.broadcast_to(lat_n[:, 1], (l_stages.size, n_lat)),
        np.broadcast_to(lat_n[:, 2], (l_stages.size, n_lat)),
        np.broadcast_to(lat_n[:, 3], (l_stages.size, n_lat)),
    ], axis=2)
    b_lat = (lat_b[None, :] + np.outer(d0, lat_n[:, 2])
             + np.outer(al0, lat_n[:, 3]))
    add_block(np.repeat(np.arange(l_stages.size * n_lat), 5),
              cols_lat.ravel(), vals_lat.ravel(), b_lat.ravel())

    # avoidance rows (slack-relaxed or hard) and slack positivity
    if slack_pairs:
        g_rows, g_cols, g_vals, g_b = [], [], [], []
        for k, (oid, n) in enumerate(slack_pairs):
            tab = tables[oid]
            scol = n_core + k
            if config.decision(oid) == YIELD:
                g_rows += [2 * k, 2 * k]
                g_cols += [9 * n, scol]
                g_vals += [1.0, -1.0]
                g_b.append(float(tab.sigma_lo[n]))
            else:
                g_rows += [2 * k, 2 * k]
                g_cols += [9 * n, scol]
                g_vals += [-1.0, -1.0]
                g_b.append(float(-tab.sigma_hi[n]))
            g_rows.append(2 * k + 1)
            g_cols.append(scol)
            g_vals.append(-1.0)
            g_b.append(0.0)
        add_block(g_rows, g_cols, g_vals, g_b)
    if not soft_avoidance:
        g_rows, g_cols, g_vals, g_b = [], [], [], []
        r = 0
        for oid in sorted(tables):
            tab = tables[oid]
            for n in range(m_hor):
                if n >= tab.empty.size or tab.empty[n]:
                    continue
                if config.decision(oid) == YIELD:
                    g_rows.append(r)
                    g_cols.append(9 * n)
                    g_vals.append(1.0)
                    g_b.append(float(tab.sigma_lo[n]))
                else:
                    g_rows.append(r)
                    g_cols.append(9 * n)
                    g_vals.append(-1.0)
                    g_b.append(float(-tab.sigma_hi[n]))
                r += 1
        if g_b:
            add_block(g_rows, g_cols, g_vals, g_b)

    a_in = sp.csr_matrix((np.concatenate(blocks_v),
                          (np.concatenate(blocks_r), np.concatenate(blocks_c))),
                         shape=(row, n_vars))
    b_in = np.concatenate(blocks_b)
    meta.cost_offset = cost_offset
    problem = qp.QpProblem(h_mat, f, a_eq, b_eq, a_in, b_in)
    return problem, meta


def cold_start_iterate(x0: np.ndarray, path: ReferencePath, cfg: OcpConfig):
    """Reference roll-out from the measured arc length."""
    m_hor = cfg.horizon_m
    states = np.empty((m_hor + 1, NX))
    inputs = np.empty((m_hor, NU))
    s = float(x0[0])
    for n in range(m_hor + 1):
        c = path.channels(np.asarray([s]))
        states[n] = [s, 0.0, 0.0, c["delta_ref"][0], c["alpha_ref"][0],
                     c["v_ref"][0], c["a_ref"][0]]
        if n < m_hor:
            inputs[n] = [c["a_req_ref"][0], c["delta_sp_ref"][0]]
        s = s + cfg.ts * float(c["v_ref"][0])
    return states, inputs


class RtiController:
    """One SQP real-time-iteration instance for a fixed configuration id.

    Each ``step`` performs a single linearize-solve cycle around the held
    iterate and shift-initializes the next call.  The reported KKT residual
    is the SQP stationarity proxy max(step norm, shooting defect).
    """

    def __init__(self, path: ReferencePath, vehicle: VehicleParams,
                 cfg: OcpConfig, ingredients: TerminalIngredients,
                 config: YieldConfiguration):
        self.path = path
        self.vehicle = vehicle
        self.cfg = cfg
        self.ingredients = ingredients
        self.config = config
        self.iterate: tuple[np.ndarray, np.ndarray] | None = None
        self._kkt_history: list[float] = []
        self._warm: qp.WarmStart | None = None
        self._warm_dims: tuple[int, int, int] | None = None

    def _shift(self, states: np.ndarray, inputs: np.ndarray):
        m_hor = self.cfg.horizon_m
        new_states = np.vstack([states[1:], states[-1]])
        new_inputs = np.vstack([inputs[1:], inputs[-1]])
        c = self.path.channels(np.asarray([states[-1, 0]]))
        safe_u = np.array([0.0, float(c["delta_sp_ref"][0])])
        new_inputs[-1] = safe_u
        new_states[-1] = models.rk4_step_array(
            states[-1], safe_u, self.cfg.ts, self.cfg.rk4_substeps,
            self.path, self.vehicle)
        assert new_states.shape == (m_hor + 1, NX)
        self.iterate = (new_states, new_inputs)

    def step(self, x0: np.ndarray, tables: dict[str, ObstacleIntervals],
             shift: bool = True) -> OcpSolution:
        started = time.perf_counter()
        if self.iterate is None:
            self.iterate = cold_start_iterate(x0, self.path, self.cfg)
        states_bar, inputs_bar = self.iterate
        problem, meta = transcribe(
            x0, states_bar, inputs_bar, self.path, self.vehicle, self.cfg,
            self.ingredients, tables, self.config)
        dims = (problem.n, problem.b_eq.size, problem.b_in.size)
        warm = self._warm if self._warm_dims == dims else None
        sol = qp.qp_solve(problem, warm_start=warm, tol=1e-6, max_iter=60)
        if sol.status in (qp.OPTIMAL, qp.MAX_ITERATIONS) and sol.x is not None:
            self._warm = qp.WarmStart(sol.x, sol.eq_duals, sol.in_duals)
            self._warm_dims = dims
        usable = sol.status == qp.OPTIMAL or (
            sol.status == qp.MAX_ITERATIONS and sol.kkt_residual <= 1e-5)
        if not usable:
            elapsed = time.perf_counter() - started
            return OcpSolution(self.config.config_id, states_bar, inputs_bar,
                               np.zeros(0), [], np.inf, np.inf, elapsed,
                               sol.status, True, sol.iterations)
        states, inputs, slacks = meta.extract(sol.x)
        step_norm = max(np.abs(states - states_bar).max(),
                        np.abs(inputs - inputs_bar).max())
        pred = models.rk4_step_array(states[:-1], inputs, self.cfg.ts,
                                     self.cfg.rk4_substeps, self.path,
                                     self.vehicle, clamp=False)
        defect = float(np.abs(pred - states[1:]).max())
        kkt = max(step_norm if step_norm > 1e-12 else 0.0, defect)
        self._kkt_history.append(kkt)
        if len(self._kkt_history) >= 6:
            recent = self._kkt_history[-6:]
            if all(b > a for a, b in zip(recent, recent[1:])) \
                    and recent[-1] > 10.0 * recent[0] and recent[-1] > 1.0:
                raise DivergedError(
                    f"KKT residual grew from {recent[0]:.2e} to {recent[-1]:.2e}")
        if shift:
            self._shift(states, inputs)
        else:
            self.iterate = (states, inputs)
        elapsed = time.perf_counter() - started
        degraded = slacks.max(initial=0.0) > 1e-6
        return OcpSolution(self.config.config_id, states, inputs, slacks,
                           meta.slack_pairs, sol.objective + meta.cost_offset,
                           kkt, elapsed, "optimal", degraded, sol.iterations)


class ParallelSolver:
    """Per-configuration controller registry with best-cost selection."""

    def __init__(self, path: ReferencePath, vehicle: VehicleParams,
                 cfg: OcpConfig, ingredients: TerminalIngredients):
        self.path = path
        self.vehicle = vehicle
        self.cfg = cfg
        self.ingredients = ingredients
        self.controllers: dict[str, RtiController] = {}

    def solve_all_configurations(self, x0: np.ndarray,
                                 tables: dict[str, ObstacleIntervals],
                                 configs: list[YieldConfiguration]):
        """Solve every configuration and return (best, all_solutions).

        Selection: minimum cost among zero-slack solutions; if none
        qualifies, minimum penalized cost flagged as degraded.  Raises
        ``AllConfigurationsFailedError`` when every solve fails.
        """
        if not configs:
            raise ValueError("need at least one configuration")
        live = set()
        solutions = []
        for config in configs:
            live.add(config.config_id)
            ctl = self.controllers.get(config.config_id)
            if ctl is None or ctl.config.decisions != config.decisions:
                ctl = RtiController(self.path, self.vehicle, self.cfg,
                                    self.ingredients, config)
                self.controllers[config.config_id] = ctl
            solutions.append(ctl.step(x0, tables))
        for stale in [k for k in self.controllers if k not in live]:
            del self.controllers[stale]
        ok = [s for s in solutions if np.isfinite(s.cost)]
        if not ok:
            raise AllConfigurationsFailedError(
                "every configuration failed: "
                + ", ".join(s.status for s in solutions))
        clean = [s for s in ok if s.max_slack <= 1e-6]
        if clean:
            best = min(clean, key=lambda s: (s.cost, s.config_id))
        else:
            best = min(ok, key=lambda s: (s.cost, s.config_id))
        return best, solutions
