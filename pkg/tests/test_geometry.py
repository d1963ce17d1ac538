import itertools

import numpy as np
import pytest

from safempc import geometry as geo
from safempc.geometry import (
    EmptyPolytopeError,
    HPolytope,
    LpProblem,
    contains,
    contains_many,
    from_box,
    lp_solve,
    max_invariant_set,
    normalize,
    pre_image,
    remove_redundancy,
    support,
)


def unit_box(n):
    return from_box(-np.ones(n), np.ones(n))


def enumerate_vertices(a, b):
    """Oracle: all basic solutions of n active rows, filtered for feasibility."""
    m, n = a.shape
    verts = []
    for rows in itertools.combinations(range(m), n):
        sub = a[list(rows)]
        if abs(np.linalg.det(sub)) < 1e-10:
            continue
        x = np.linalg.solve(sub, b[list(rows)])
        if (a @ x <= b + 1e-8).all():
            verts.append(x)
    return verts


class TestLpSolve:
    def test_single_active_constraint(self):
        res = lp_solve(LpProblem([1.0], [[1.0], [-1.0]], [3.0, 0.0]))
        assert res.status == geo.OPTIMAL
        assert res.value == pytest.approx(3.0, abs=1e-9)
        assert res.x[0] == pytest.approx(3.0, abs=1e-9)

    def test_unit_box_corner(self):
        box = unit_box(2)
        res = lp_solve(LpProblem([1.0, 1.0], box.normals, box.offsets))
        assert res.status == geo.OPTIMAL
        assert res.value == pytest.approx(2.0, abs=1e-9)
        np.testing.assert_allclose(res.x, [1.0, 1.0], atol=1e-9)

    def test_unbounded(self):
        res = lp_solve(LpProblem([1.0, 0.0], [[-1.0, 0.0]], [0.0]))
        assert res.status == geo.UNBOUNDED

    def test_infeasible(self):
        res = lp_solve(LpProblem([1.0], [[1.0], [-1.0]], [-1.0, -1.0]))
        assert res.status == geo.INFEASIBLE

    def test_against_vertex_enumeration(self):
        rng = np.random.default_rng(7)
        for _ in range(60):
            n = rng.integers(2, 6)
            m = rng.integers(n + 1, 12)
            a = rng.normal(size=(m, n))
            a = np.vstack([a, np.eye(n), -np.eye(n)])  # keep it bounded
            interior = rng.normal(size=n) * 0.3
            b = a @ interior + rng.uniform(0.2, 2.0, size=a.shape[0])
            c = rng.normal(size=n)
            res = lp_solve(LpProblem(c, a, b))
            assert res.status == geo.OPTIMAL
            verts = enumerate_vertices(a, b)
            best = max(c @ v for v in verts)
            assert res.value == pytest.approx(best, abs=1e-7)
            assert (a @ res.x <= b + 1e-8).all()

    def test_optimum_dominates_random_feasible_points(self):
        rng = np.random.default_rng(3)
        box = unit_box(4)
        c = rng.normal(size=4)
        res = lp_solve(LpProblem(c, box.normals, box.offsets))
        pts = rng.uniform(-1, 1, size=(1000, 4))
        assert (pts @ c <= res.value + 1e-8).all()


class TestContains:
    def test_origin_in_unit_box(self):
        assert contains(unit_box(2), [0.0, 0.0])

    def test_outside_point(self):
        assert not contains(unit_box(2), [2.0, 0.0])

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            contains(unit_box(2), [0.0, 0.0, 0.0])

    def test_matches_direct_inequalities(self):
        rng = np.random.default_rng(11)
        a = rng.normal(size=(8, 3))
        b = rng.uniform(0.5, 2.0, size=8)
        poly = HPolytope(a, b)
        pts = rng.uniform(-2, 2, size=(1000, 3))
        verdicts = contains_many(poly, pts)
        direct = (a @ pts.T <= b[:, None] + 1e-9).all(axis=0)
        assert (verdicts == direct).all()


class TestRemoveRedundancy:
    def test_duplicate_facet(self):
        box = unit_box(2)
        dup = HPolytope(np.vstack([box.normals, [[1.0, 0.0]]]),
                        np.hstack([box.offsets, 1.0]))
        reduced = remove_redundancy(dup)
        assert reduced.num_rows == 4

    def test_slack_facet(self):
        box = unit_box(2)
        slack = HPolytope(np.vstack([box.normals, [[1.0, 0.0]]]),
                          np.hstack([box.offsets, 5.0]))
        reduced = remove_redundancy(slack)
        assert reduced.num_rows == 4
        assert support(reduced, [1.0, 0.0]) == pytest.approx(1.0, abs=1e-9)

    def test_empty_raises(self):
        poly = HPolytope([[1.0], [-1.0]], [-1.0, -1.0])
        with pytest.raises(EmptyPolytopeError):
            remove_redundancy(poly)

    def test_idempotent(self):
        rng = np.random.default_rng(5)
        a = rng.normal(size=(14, 3))
        b = rng.uniform(0.5, 1.5, size=14)
        once = remove_redundancy(HPolytope(a, b))
        twice = remove_redundancy(once)
        assert once.num_rows == twice.num_rows
        np.testing.assert_allclose(once.normals, twice.normals, atol=1e-12)

    def test_set_equality_against_per_row_oracle(self):
        rng = np.random.default_rng(13)
        for _ in range(20):
            a = rng.normal(size=(12, 4))
            b = rng.uniform(0.3, 1.5, size=12)
            poly = normalize(HPolytope(a, b))
            reduced = remove_redundancy(poly)
            # oracle: row redundant iff maximizing it over the others stays <= b_i
            oracle_rows = []
            for i in range(poly.num_rows):
                others = [j for j in range(poly.num_rows) if j != i]
                res = lp_solve(LpProblem(poly.normals[i],
                                         np.vstack([poly.normals[others],
                                                    poly.normals[i:i + 1]]),
                                         np.hstack([poly.offsets[others],
                                                    poly.offsets[i] + 1.0])))
                val = np.inf if res.status == geo.UNBOUNDED else res.value
                if val > poly.offsets[i] + 1e-9:
                    oracle_rows.append(i)
            assert reduced.num_rows == len(oracle_rows)
            # mutual containment on all original normals
            for d, bi in zip(poly.normals, poly.offsets):
                h = support(reduced, d)
                h_orig = support(poly, d)
                if np.isfinite(h_orig):
                    assert h == pytest.approx(h_orig, abs=1e-7)


class TestPreImage:
    def test_identity(self):
        box = unit_box(3)
        pre = pre_image(box, np.eye(3))
        np.testing.assert_allclose(pre.normals, box.normals)
        np.testing.assert_allclose(pre.offsets, box.offsets)

    def test_scaling(self):
        pre = pre_image(unit_box(2), 2.0 * np.eye(2))
        assert support(pre, [1.0, 0.0]) == pytest.approx(0.5, abs=1e-9)

    def test_membership_oracle(self):
        rng = np.random.default_rng(17)
        box = unit_box(3)
        a_map = rng.normal(size=(3, 3))
        pre = pre_image(box, a_map)
        pts = rng.uniform(-2, 2, size=(1000, 3))
        lhs = contains_many(pre, pts)
        rhs = contains_many(box, pts @ a_map.T)
        assert (lhs == rhs).all()

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            pre_image(unit_box(2), np.eye(3))


class TestMaxInvariantSet:
    def test_deadbeat_returns_constraint_set(self):
        box = unit_box(2)
        inv = max_invariant_set([np.zeros((2, 2))], box)
        assert inv.num_rows == 4
        assert support(inv, [1.0, 0.0]) == pytest.approx(1.0, abs=1e-9)

    def test_scalar_contraction_already_invariant(self):
        seg = from_box([-1.0], [1.0])
        inv = max_invariant_set([np.array([[0.5]])], seg)
        assert support(inv, [1.0]) == pytest.approx(1.0, abs=1e-9)
        assert support(inv, [-1.0]) == pytest.approx(1.0, abs=1e-9)

    def test_unstable_map_rejected(self):
        with pytest.raises(ValueError):
            max_invariant_set([np.array([[1.1]])], from_box([-1.0], [1.0]))

    def test_rotation_contraction_monte_carlo(self):
        theta = 0.4
        rot = 0.9 * np.array([[np.cos(theta), -np.sin(theta)],
                              [np.sin(theta), np.cos(theta)]])
        constraint = HPolytope(np.vstack([np.eye(2), -np.eye(2), [[1.0, 1.0]]]),
                               np.array([1.0, 1.0, 1.0, 1.0, 0.8]))
        inv = max_invariant_set([rot], constraint)
        assert geo.invariance_certificate(inv, [rot])
        rng = np.random.default_rng(23)
        pts = geo.sample(inv, 2000, rng)
        for _ in range(50):
            pts = pts @ rot.T
            assert contains_many(inv, pts, tol=1e-9).all()

    def test_invariance_certificate_property(self):
        # support of the preimage along each facet normal dominates the set's
        rot = 0.8 * np.eye(2)
        box = unit_box(2)
        inv = max_invariant_set([rot], box)
        for d, bi in zip(inv.normals, inv.offsets):
            assert support(inv, rot.T @ d) <= bi + 1e-7


class TestNormalize:
    def test_unit_rows(self):
        poly = normalize(HPolytope([[3.0, 4.0]], [10.0]))
        assert np.linalg.norm(poly.normals[0]) == pytest.approx(1.0)
        assert poly.offsets[0] == pytest.approx(2.0)

    def test_zero_row_rejected(self):
        with pytest.raises(ValueError):
            normalize(HPolytope([[0.0, 0.0]], [1.0]))
