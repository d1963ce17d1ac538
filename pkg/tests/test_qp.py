import itertools

import numpy as np
import pytest
import scipy.sparse as sp

from safempc.qp import (
    INFEASIBLE,
    MAX_ITERATIONS,
    OPTIMAL,
    QpProblem,
    QpSolution,
    WarmStart,
    qp_solve,
)


def random_feasible_qp(rng, n=None, m_in=None, m_eq=0):
    """Strictly convex QP with a known interior-feasible point."""
    n = int(rng.integers(2, 6)) if n is None else n
    m_in = int(rng.integers(2, 11)) if m_in is None else m_in
    root = rng.normal(size=(n, n))
    h = root.T @ root + 0.5 * np.eye(n)
    f = rng.normal(size=n)
    x_feas = rng.normal(size=n) * 0.5
    a_in = rng.normal(size=(m_in, n))
    b_in = a_in @ x_feas + rng.uniform(0.1, 1.5, size=m_in)
    a_eq = rng.normal(size=(m_eq, n))
    b_eq = a_eq @ x_feas if m_eq else np.zeros(0)
    return QpProblem(h, f, a_eq if m_eq else None, b_eq if m_eq else None,
                     a_in, b_in)


def active_set_oracle(p: QpProblem):
    """Exhaustive enumeration over active sets; requires strict convexity."""
    n, m_in, m_eq = p.n, p.b_in.size, p.b_eq.size
    h = np.asarray(p.h, dtype=float)
    best = None
    for k in range(0, min(n - m_eq, m_in) + 1):
        for subset in itertools.combinations(range(m_in), k):
            rows = np.vstack([p.a_eq.reshape(m_eq, n),
                              p.a_in[list(subset)]]) if (m_eq + k) else np.zeros((0, n))
            rhs = np.hstack([p.b_eq, p.b_in[list(subset)]])
            kkt = np.zeros((n + m_eq + k, n + m_eq + k))
            kkt[:n, :n] = h
            kkt[:n, n:] = rows.T
            kkt[n:, :n] = rows
            try:
                sol = np.linalg.solve(kkt, np.hstack([-p.f, rhs]))
            except np.linalg.LinAlgError:
                continue
            x = sol[:n]
            lam = sol[n + m_eq:]
            if (p.a_in @ x <= p.b_in + 1e-8).all() and (lam >= -1e-8).all():
                val = 0.5 * x @ h @ x + p.f @ x
                if best is None or val < best:
                    best = val
    return best


class TestBasics:
    def test_scalar_halfline_projection(self):
        # minimize x^2 subject to x >= 1
        sol = qp_solve(QpProblem(np.array([[2.0]]), np.zeros(1),
                                 a_in=np.array([[-1.0]]), b_in=np.array([-1.0])))
        assert sol.status == OPTIMAL
        assert sol.x[0] == pytest.approx(1.0, abs=1e-7)
        assert sol.in_duals[0] == pytest.approx(2.0, abs=1e-6)

    def test_box_projection_is_clamp(self):
        rng = np.random.default_rng(0)
        c = rng.uniform(-2, 2, size=5)
        eye = np.eye(5)
        sol = qp_solve(QpProblem(2 * eye, -2 * c,
                                 a_in=np.vstack([eye, -eye]),
                                 b_in=np.ones(10)))
        assert sol.status == OPTIMAL
        np.testing.assert_allclose(sol.x, np.clip(c, -1, 1), atol=1e-7)

    def test_equality_only(self):
        h = np.diag([2.0, 4.0])
        sol = qp_solve(QpProblem(h, np.zeros(2),
                                 a_eq=np.array([[1.0, 1.0]]),
                                 b_eq=np.array([1.0])))
        assert sol.status == OPTIMAL
        np.testing.assert_allclose(sol.x, [2 / 3, 1 / 3], atol=1e-7)

    def test_infeasible_certificate(self):
        # x <= 0 and x >= 1 cannot hold
        sol = qp_solve(QpProblem(np.array([[2.0]]), np.zeros(1),
                                 a_in=np.array([[1.0], [-1.0]]),
                                 b_in=np.array([0.0, -1.0])))
        assert sol.status == INFEASIBLE
        assert sol.certificate is not None

    def test_max_iterations_reported(self):
        p = random_feasible_qp(np.random.default_rng(1))
        sol = qp_solve(p, max_iter=1)
        assert sol.status in (MAX_ITERATIONS, OPTIMAL)


class TestOracle:
    def test_500_random_qps_match_active_set_enumeration(self):
        rng = np.random.default_rng(2024)
        for i in range(500):
            m_eq = int(rng.integers(0, 2))
            p = random_feasible_qp(rng, m_eq=m_eq)
            sol = qp_solve(p)
            assert sol.status == OPTIMAL, f"case {i}: {sol.status}"
            assert sol.kkt_residual <= 1e-6
            want = active_set_oracle(p)
            assert want is not None
            assert sol.objective == pytest.approx(want, abs=1e-6), f"case {i}"


class TestWarmStartAndScaling:
    def test_warm_resolve_takes_at_most_two_iterations(self):
        rng = np.random.default_rng(7)
        p = random_feasible_qp(rng, n=5, m_in=8)
        first = qp_solve(p)
        assert first.status == OPTIMAL
        again = qp_solve(p, warm_start=WarmStart(first.x, first.eq_duals,
                                                 first.in_duals))
        assert again.status == OPTIMAL
        assert again.iterations <= 2
        np.testing.assert_allclose(again.x, first.x, atol=1e-6)

    def test_row_scaling_invariance(self):
        rng = np.random.default_rng(9)
        p = random_feasible_qp(rng, n=4, m_in=7)
        scale = rng.uniform(0.1, 10.0, size=7)
        scaled = QpProblem(p.h, p.f, None, None,
                           p.a_in * scale[:, None], p.b_in * scale)
        a = qp_solve(p)
        b = qp_solve(scaled)
        assert a.status == b.status == OPTIMAL
        np.testing.assert_allclose(a.x, b.x, atol=1e-6)

    def test_determinism(self):
        p = random_feasible_qp(np.random.default_rng(11))
        a = qp_solve(p)
        b = qp_solve(p)
        np.testing.assert_array_equal(a.x, b.x)
        assert a.iterations == b.iterations


class TestSparseBackend:
    def test_sparse_matches_dense(self):
        rng = np.random.default_rng(13)
        for _ in range(20):
            p = random_feasible_qp(rng, m_eq=1)
            ps = QpProblem(sp.csc_matrix(p.h), p.f,
                           sp.csr_matrix(p.a_eq), p.b_eq,
                           sp.csr_matrix(p.a_in), p.b_in)
            dense = qp_solve(p)
            sparse = qp_solve(ps)
            assert dense.status == sparse.status == OPTIMAL
            np.testing.assert_allclose(sparse.x, dense.x, atol=1e-6)
            assert sparse.objective == pytest.approx(dense.objective, abs=1e-7)

    def test_large_stagewise_structure(self):
        # block-banded toy: 60 stages of a double integrator with input bounds
        n_stage, nx, nu = 60, 2, 1
        a_mat = np.array([[1.0, 0.1], [0.0, 1.0]])
        b_mat = np.array([[0.005], [0.1]])
        n = n_stage * (nx + nu) + nx
        h = sp.lil_matrix((n, n))
        f = np.zeros(n)
        rows_eq, cols_eq, vals_eq = [], [], []
        b_eq = []

        def xi(k):
            return k * (nx + nu)

        def ui(k):
            return k * (nx + nu) + nx

        target = np.array([1.0, 0.0])
        row = 0
        for k in range(n_stage):
            h[xi(k):xi(k) + nx, xi(k):xi(k) + nx] = np.eye(nx)
            f[xi(k):xi(k) + nx] = -target
            h[ui(k), ui(k)] = 0.1
            for i in range(nx):
                rows_eq += [row + i] * (nx + nu + 1)
                cols_eq += list(range(xi(k), xi(k) + nx)) + [ui(k), xi(k + 1) + i]
                vals_eq += list(-a_mat[i]) + [-b_mat[i, 0], 1.0]
            b_eq += [0.0] * nx
            row += nx
        # pin the initial state
        rows_eq += [row, row + 1]
        cols_eq += [xi(0), xi(0) + 1]
        vals_eq += [1.0, 1.0]
        b_eq += [0.0, 0.0]
        a_eq = sp.csr_matrix((vals_eq, (rows_eq, cols_eq)), shape=(row + 2, n))
        m = n_stage
        a_in = sp.lil_matrix((2 * m, n))
        b_in = np.ones(2 * m) * 0.5
        for k in range(n_stage):
            a_in[2 * k, ui(k)] = 1.0
            a_in[2 * k + 1, ui(k)] = -1.0
        sol = qp_solve(QpProblem(sp.csc_matrix(h), f, a_eq, np.array(b_eq),
                                 sp.csr_matrix(a_in), b_in))
        assert sol.status == OPTIMAL
        assert sol.kkt_residual <= 1e-6
        # inputs respect the bounds
        u = sol.x[[ui(k) for k in range(n_stage)]]
        assert np.abs(u).max() <= 0.5 + 1e-7
