"""H-representation polytope algebra and a small dense LP solver.

Everything downstream of the terminal-set synthesis (redundancy removal,
invariance certificates, support-function bounds) is built on the two
primitives in this module: a two-phase tableau simplex with Bland's rule
and an immutable H-polytope ``{x : normals @ x <= offsets}``.

Problem sizes here are tiny (tens of rows, <= 6 columns), so the solver
optimizes for certified correctness rather than speed: every optimal
result is re-checked for primal and dual feasibility before it is
returned.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

OPTIMAL = "optimal"
UNBOUNDED = "unbounded"
INFEASIBLE = "infeasible"

_FEAS_TOL = 1e-8
_PIVOT_TOL = 1e-10
_SUPPORT_TOL = 1e-7


class EmptyPolytopeError(Exception):
    """The polytope has no feasible point."""


class NotConvergedError(Exception):
    """Invariant-set iteration hit its iteration cap."""

    def __init__(self, max_iter: int):
        super().__init__(f"no convergence after {max_iter} iterations")
        self.max_iter = max_iter


@dataclass(frozen=True)
class LpProblem:
    """maximize cost @ x  subject to  constraint_normals @ x <= constraint_offsets."""

    cost: np.ndarray
    constraint_normals: np.ndarray
    constraint_offsets: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.cost, dtype=float)
        a = np.atleast_2d(np.asarray(self.constraint_normals, dtype=float))
        b = np.asarray(self.constraint_offsets, dtype=float).ravel()
        if a.shape[0] != b.shape[0]:
            raise ValueError("row count of normals must match offsets length")
        if a.shape[1] != c.shape[0]:
            raise ValueError("cost dimension must match constraint columns")
        if not (np.isfinite(c).all() and np.isfinite(a).all() and np.isfinite(b).all()):
            raise ValueError("LP coefficients must be finite")
        object.__setattr__(self, "cost", c)
        object.__setattr__(self, "constraint_normals", a)
        object.__setattr__(self, "constraint_offsets", b)


@dataclass(frozen=True)
class LpResult:
    status: str
    value: float | None = None
    x: np.ndarray | None = None
    duals: np.ndarray | None = None


def _simplex(tableau, basis, cost_row, n_cols):
    """Run Bland's-rule simplex on an equality tableau; mutates in place.

    tableau is (m, n_cols+1) with the rhs in the last column and b >= 0
    throughout.  Returns "optimal" or "unbounded".
    """
    m = tableau.shape[0]
    while True:
        red = cost_row[:n_cols]
        entering = -1
        for j in range(n_cols):
            if red[j] < -_PIVOT_TOL:
                entering = j  # Bland: smallest index
                break
        if entering < 0:
            return OPTIMAL
        col = tableau[:, entering]
        ratios = np.full(m, np.inf)
        pos = col > _PIVOT_TOL
        ratios[pos] = tableau[pos, -1] / col[pos]
        if not pos.any():
            return UNBOUNDED
        best = np.min(ratios)
        # Bland tie-break: leaving row with the smallest basis index
        cand = np.flatnonzero(ratios <= best + 1e-12)
        leave = cand[np.argmin([basis[r] for r in cand])]
        piv = tableau[leave, entering]
        tableau[leave] /= piv
        for r in range(m):
            if r != leave and abs(tableau[r, entering]) > 1e-14:
                tableau[r] -= tableau[r, entering] * tableau[leave]
        cost_row -= cost_row[entering] * tableau[leave]
        basis[leave] = entering


def lp_solve(p: LpProblem) -> LpResult:
    """Solve a dense LP by two-phase tableau simplex with Bland's rule.

    Free variables are split as x = u - w, u, w >= 0; inequality rows get
    slack variables.  Optimal points are certified: primal residuals and
    reduced costs are both checked against 1e-8 before returning.
    """
    c = p.cost
    a = p.constraint_normals
    b = p.constraint_offsets
    m, n = a.shape

    # standard form: [A, -A, I] z = b, z >= 0, minimize [-c, c, 0] z
    a_std = np.hstack([a, -a, np.eye(m)])
    b_std = b.copy()
    flip = b_std < 0
    a_std[flip] *= -1.0
    b_std[flip] *= -1.0
    n_std = a_std.shape[1]

    # phase I
    tableau = np.hstack([a_std, np.eye(m), b_std[:, None]])
    basis = list(range(n_std, n_std + m))
    cost1 = np.zeros(n_std + m + 1)
    cost1[n_std:n_std + m] = 1.0
    for r in range(m):  # price out the artificial basis
        cost1 -= tableau[r]
    status = _simplex(tableau, basis, cost1, n_std + m)
    if -cost1[-1] > _FEAS_TOL:
        return LpResult(INFEASIBLE)
    # drive any lingering artificials out of the basis
    for r in range(m):
        if basis[r] >= n_std:
            row = tableau[r]
            j = next((k for k in range(n_std) if abs(row[k]) > _PIVOT_TOL), None)
            if j is None:
                continue  # redundant row
            piv = row[j]
            tableau[r] /= piv
            for rr in range(m):
                if rr != r and abs(tableau[rr, j]) > 1e-14:
                    tableau[rr] -= tableau[rr, j] * tableau[r]
            basis[r] = j

    # phase II on the original columns
    tableau2 = np.hstack([tableau[:, :n_std], tableau[:, -1:]])
    cost2 = np.zeros(n_std + 1)
    cost2[:n] = -c
    cost2[n:2 * n] = c
    for r in range(m):
        if basis[r] < n_std:
            cost2 -= cost2[basis[r]] * tableau2[r]
    status = _simplex(tableau2, basis, cost2, n_std)
    if status == UNBOUNDED:
        return LpResult(UNBOUNDED)

    z = np.zeros(n_std)
    for r, bi in enumerate(basis):
        if bi < n_std:
            z[bi] = tableau2[r, -1]
    x = z[:n] - z[n:2 * n]
    value = float(c @ x)

    # duals: reduced costs on the slack columns give y with sign flips undone
    red = cost2[:n_std]
    y = red[2 * n:2 * n + m].copy()
    y[flip] *= -1.0
    resid = a @ x - b
    if resid.max(initial=0.0) > _FEAS_TOL * max(1.0, np.abs(b).max(initial=1.0)):
        raise ArithmeticError("simplex returned a primal-infeasible point")
    if red.min(initial=0.0) < -_FEAS_TOL:
        raise ArithmeticError("simplex terminated without dual feasibility")
    return LpResult(OPTIMAL, value, x, np.abs(y))


@dataclass(frozen=True)
class HPolytope:
    """Polytope {x : normals @ x <= offsets} in H-representation."""

    normals: np.ndarray
    offsets: np.ndarray

    def __post_init__(self):
        a = np.atleast_2d(np.asarray(self.normals, dtype=float))
        b = np.asarray(self.offsets, dtype=float).ravel()
        if a.shape[0] != b.shape[0]:
            raise ValueError("normals row count must equal offsets length")
        object.__setattr__(self, "normals", a)
        object.__setattr__(self, "offsets", b)

    @property
    def dim(self) -> int:
        return self.normals.shape[1]

    @property
    def num_rows(self) -> int:
        return self.normals.shape[0]


def from_box(lower, upper) -> HPolytope:
    """Axis-aligned box as an H-polytope."""
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    n = lower.size
    eye = np.eye(n)
    return HPolytope(np.vstack([eye, -eye]), np.hstack([upper, -lower]))


def normalize(poly: HPolytope) -> HPolytope:
    """Scale every row to a unit-norm facet normal; zero rows are rejected."""
    norms = np.linalg.norm(poly.normals, axis=1)
    if (norms < 1e-14).any():
        raise ValueError("zero facet normal")
    return HPolytope(poly.normals / norms[:, None], poly.offsets / norms)


def contains(poly: HPolytope, x, tol: float = 1e-9) -> bool:
    """Row-wise membership test: normals @ x <= offsets + tol."""
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != poly.dim:
        raise ValueError(f"point dim {x.shape[-1]} != polytope dim {poly.dim}")
    return bool((poly.normals @ x <= poly.offsets + tol).all())


def contains_many(poly: HPolytope, pts: np.ndarray, tol: float = 1e-9) -> np.ndarray:
    """Vectorized membership for an (n_pts, dim) array."""
    pts = np.atleast_2d(np.asarray(pts, dtype=float))
    return (poly.normals @ pts.T <= poly.offsets[:, None] + tol).all(axis=0)


def support(poly: HPolytope, direction) -> float:
    """Support function h(d) = max_{x in P} d @ x; +inf when unbounded."""
    res = lp_solve(LpProblem(np.asarray(direction, dtype=float),
                             poly.normals, poly.offsets))
    if res.status == UNBOUNDED:
        return np.inf
    if res.status == INFEASIBLE:
        raise EmptyPolytopeError("support of an empty polytope")
    return res.value


def is_empty(poly: HPolytope) -> bool:
    res = lp_solve(LpProblem(np.zeros(poly.dim), poly.normals, poly.offsets))
    return res.status == INFEASIBLE


def intersect(p: HPolytope, q: HPolytope) -> HPolytope:
    if p.dim != q.dim:
        raise ValueError("dimension mismatch")
    return HPolytope(np.vstack([p.normals, q.normals]),
                     np.hstack([p.offsets, q.offsets]))


def remove_redundancy(poly: HPolytope) -> HPolytope:
    """Minimal H-representation of the same set.

    Rows are unit-normalized first so all tolerances are scale-free, exact
    duplicates are collapsed, and each surviving row is kept only if
    maximizing its normal subject to the remaining rows (and itself relaxed
    by +1) exceeds its offset.  Raises ``EmptyPolytopeError`` on an empty
    input.
    """
    poly = normalize(poly)
    if is_empty(poly):
        raise EmptyPolytopeError("cannot reduce an empty polytope")
    a, b = poly.normals, poly.offsets

    order = np.lexsort(np.vstack([b, a.T]))
    keep: list[int] = []
    for i in order:
        dup = any(np.abs(a[i] - a[j]).max() < 1e-12 and b[j] <= b[i] + 1e-12
                  for j in keep)
        if not dup:
            keep.append(i)
    keep.sort()
    a, b = a[keep], b[keep]

    alive = list(range(len(b)))
    for i in range(len(b)):
        others = [j for j in alive if j != i]
        if not others:
            continue
        normals = np.vstack([a[others], a[i:i + 1]])
        offsets = np.hstack([b[others], b[i] + 1.0])
        res = lp_solve(LpProblem(a[i], normals, offsets))
        val = np.inf if res.status == UNBOUNDED else res.value
        if val <= b[i] + 1e-9:
            alive.remove(i)
    return HPolytope(a[alive], b[alive])


def pre_image(poly: HPolytope, a_map: np.ndarray) -> HPolytope:
    """One-step backward set {x : normals @ (A x) <= offsets}."""
    a_map = np.asarray(a_map, dtype=float)
    if a_map.shape != (poly.dim, poly.dim):
        raise ValueError("map must be square and match the polytope dimension")
    return HPolytope(poly.normals @ a_map, poly.offsets.copy())


def _is_subset(inner: HPolytope, outer: HPolytope, tol: float) -> bool:
    """inner ⊆ outer via support of inner along every outer facet normal."""
    for d, bi in zip(outer.normals, outer.offsets):
        if support(inner, d) > bi + tol:
            return False
    return True


def max_invariant_set(a_cl_list, x0: HPolytope, max_iter: int = 200) -> HPolytope:
    """Maximal constraint-admissible invariant subset of x0.

    Iterates S <- S ∩ Pre_1(S) ∩ ... ∩ Pre_r(S) with redundancy removal
    each sweep, declaring convergence when the previous set is contained
    in the new one (the reverse containment holds by construction), tested
    through support functions at absolute tolerance 1e-7.  Each closed-loop
    map must be Schur stable.
    """
    a_cl_list = [np.asarray(a, dtype=float) for a in a_cl_list]
    for a_cl in a_cl_list:
        rho = np.abs(np.linalg.eigvals(a_cl)).max()
        if rho >= 1.0:
            raise ValueError(f"closed-loop map with spectral radius {rho:.4f} >= 1")
    current = remove_redundancy(x0)
    for _ in range(max_iter):
        normals = np.vstack([current.normals]
                            + [current.normals @ a for a in a_cl_list])
        offsets = np.tile(current.offsets, len(a_cl_list) + 1)
        # mapped rows can degenerate to 0 @ x <= b: drop if vacuous
        trivial = np.linalg.norm(normals, axis=1) < 1e-14
        if (offsets[trivial] < -1e-12).any():
            raise EmptyPolytopeError("invariant-set iteration emptied the set")
        stacked = HPolytope(normals[~trivial], offsets[~trivial])
        try:
            new = remove_redundancy(stacked)
        except EmptyPolytopeError:
            raise EmptyPolytopeError("invariant-set iteration emptied the set")
        if _is_subset(current, new, _SUPPORT_TOL):
            return new
        current = new
    raise NotConvergedError(max_iter)


def invariance_certificate(poly: HPolytope, a_cl_list, tol: float = _SUPPORT_TOL) -> bool:
    """True iff max_{x in S} d_i @ (A x) <= b_i for every facet i and map A."""
    for a_cl in a_cl_list:
        image = HPolytope(poly.normals @ np.asarray(a_cl, dtype=float), poly.offsets)
        # support of S along each mapped facet normal must stay under b_i
        for d, bi in zip(image.normals, poly.offsets):
            if support(poly, d) > bi + tol:
                return False
    return True


def bounding_box(poly: HPolytope) -> tuple[np.ndarray, np.ndarray]:
    """Per-axis support bounds (lower, upper)."""
    n = poly.dim
    lower = np.empty(n)
    upper = np.empty(n)
    for k in range(n):
        e = np.zeros(n)
        e[k] = 1.0
        upper[k] = support(poly, e)
        lower[k] = -support(poly, -e)
    return lower, upper


def sample(poly: HPolytope, count: int, rng: np.random.Generator) -> np.ndarray:
    """Rejection-sample points from a bounded polytope."""
    lower, upper = bounding_box(poly)
    if not (np.isfinite(lower).all() and np.isfinite(upper).all()):
        raise ValueError("cannot sample an unbounded polytope")
    out = np.empty((0, poly.dim))
    while out.shape[0] < count:
        batch = rng.uniform(lower, upper, size=(4 * count, poly.dim))
        good = batch[contains_many(poly, batch)]
        out = np.vstack([out, good])[:count]
    return out
