"""Exact discrete Kantorovich problem.

The LP oracle is a transportation simplex (north-west corner start, Bland's
rule on both the entering and the leaving variable) that returns a basic
optimal plan together with a dual certificate.  For 1-D marginals the
comonotone coupling is built directly from the cumulative masses.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .errors import InvalidBeta, MassMismatch, NoConvergence
from .measure_core import MASS_TOL, DiscreteMeasure, Grid, _check_masses, _frozen, check_same_grid

#: absolute LP tolerance on unit-mass instances (scaled by total mass otherwise)
LP_TOL = 1e-9


@dataclass(frozen=True)
class CostField:
    """Cost values ``c[i, j] = c(x_i, y_j)`` on a pair of grids.

    ``beta`` is set only for ``|x - y|**beta`` costs with ``beta > 1``; it
    tags the strictly convex difference costs for which the monotone
    coupling is optimal.
    """

    grid1: Grid
    grid2: Grid
    c: np.ndarray = field(repr=False)
    beta: float | None = None

    def __post_init__(self):
        c = _frozen(self.c)
        if c.shape != (self.grid1.m, self.grid2.m):
            raise ValueError(f"cost shape {c.shape} does not match grids")
        if not np.all(np.isfinite(c)):
            raise ValueError("cost entries must be finite")
        if self.beta is not None:
            if not self.beta > 1:
                raise ValueError("convex_difference tag requires beta > 1")
            ref = _power_cost(self.grid1, self.grid2, self.beta)
            if not np.allclose(c, ref, rtol=1e-14, atol=1e-14 * max(1.0, ref.max())):
                raise ValueError("tagged cost is not |x - y|**beta")
        object.__setattr__(self, "c", c)

    @classmethod
    def power(cls, grid1: Grid, grid2: Grid, beta: float) -> "CostField":
        return cls(grid1, grid2, _power_cost(grid1, grid2, beta), beta if beta > 1 else None)

    @classmethod
    def from_function(cls, grid1: Grid, grid2: Grid, f) -> "CostField":
        x, y = np.meshgrid(grid1.centers, grid2.centers, indexing="ij")
        return cls(grid1, grid2, f(x, y))

    @property
    def convex_difference(self) -> bool:
        return self.beta is not None


def _power_cost(grid1, grid2, beta):
    return np.abs(grid1.centers[:, None] - grid2.centers[None, :]) ** beta


@dataclass(frozen=True)
class TransportPlan:
    """Nonnegative cell masses ``P[i, j]`` on ``grid1 x grid2``."""

    grid1: Grid
    grid2: Grid
    P: np.ndarray = field(repr=False)

    def __post_init__(self):
        P = _frozen(self.P)
        if P.shape != (self.grid1.m, self.grid2.m):
            raise ValueError(f"plan shape {P.shape} does not match grids")
        if not np.all(np.isfinite(P)) or np.any(P < 0):
            raise ValueError("plan entries must be finite and nonnegative")
        object.__setattr__(self, "P", P)

    @property
    def mass(self) -> float:
        return math.fsum(self.P.ravel())

    @property
    def nnz(self) -> int:
        return int(np.count_nonzero(self.P))

    def row_marginal(self) -> DiscreteMeasure:
        return DiscreteMeasure(self.grid1, self.P.sum(axis=1))

    def col_marginal(self) -> DiscreteMeasure:
        return DiscreteMeasure(self.grid2, self.P.sum(axis=0))

    def normalize(self) -> "TransportPlan":
        return TransportPlan(self.grid1, self.grid2, self.P / self.mass)

    def cost(self, c: CostField) -> float:
        return float((c.c * self.P).sum())

    def to_dict(self):
        return {"m1": self.grid1.m, "m2": self.grid2.m, "P": self.P.tolist()}

    @classmethod
    def from_dict(cls, d, grid1: Grid, grid2: Grid) -> "TransportPlan":
        if d["m1"] != grid1.m or d["m2"] != grid2.m:
            raise ValueError("plan dimensions do not match the grids")
        return cls(grid1, grid2, np.asarray(d["P"], dtype=float))

    def csv_rows(self):
        """(i, j, x_i, y_j, mass) for every nonzero entry, row-major."""
        x, y = self.grid1.centers, self.grid2.centers
        for i, j in zip(*np.nonzero(self.P)):
            yield int(i), int(j), float(x[i]), float(y[j]), float(self.P[i, j])


class CouplingCheck(NamedTuple):
    ok: bool
    row_residual: float
    col_residual: float
    min_entry: float

    def __bool__(self):
        return self.ok


def check_coupling(plan: TransportPlan, mu1: DiscreteMeasure, mu2: DiscreteMeasure, tol: float) -> CouplingCheck:
    check_same_grid(plan.grid1, mu1.grid)
    check_same_grid(plan.grid2, mu2.grid)
    r = float(np.abs(plan.P.sum(axis=1) - mu1.w).max())
    c = float(np.abs(plan.P.sum(axis=0) - mu2.w).max())
    lo = float(plan.P.min())
    return CouplingCheck(r <= tol and c <= tol and lo >= -tol, r, c, lo)


# ---------------------------------------------------------------------------
# transportation simplex


class KPResult(NamedTuple):
    P: np.ndarray
    value: float
    u: np.ndarray
    v: np.ndarray
    iterations: int


def _northwest(a, b):
    """North-west corner allocation; returns list of basic cells and the plan."""
    m, n = len(a), len(b)
    X = np.zeros((m, n))
    cells = []
    ra, rb = a.astype(float).copy(), b.astype(float).copy()
    i = j = 0
    while i < m and j < n:
        x = min(ra[i], rb[j])
        X[i, j] = x
        cells.append((i, j))
        row_done = ra[i] <= rb[j]
        ra[i] -= x
        rb[j] -= x
        if i == m - 1 and j == n - 1:
            break
        if (row_done and i < m - 1) or j == n - 1:
            i += 1
        else:
            j += 1
    return cells, X


def _potentials(m, n, row_adj, col_adj, C):
    u = np.empty(m)
    v = np.empty(n)
    seen_r = np.zeros(m, bool)
    seen_c = np.zeros(n, bool)
    u[0] = 0.0
    seen_r[0] = True
    queue = deque([(0, 0)])  # (kind, index): 0 = row, 1 = column
    while queue:
        kind, k = queue.popleft()
        if kind == 0:
            for j in row_adj[k]:
                if not seen_c[j]:
                    v[j] = C[k, j] - u[k]
                    seen_c[j] = True
                    queue.append((1, j))
        else:
            for i in col_adj[k]:
                if not seen_r[i]:
                    u[i] = C[i, k] - v[k]
                    seen_r[i] = True
                    queue.append((0, i))
    return u, v


def _tree_path(r, s, row_adj, col_adj):
    """Alternating row/column path from row ``r`` to column ``s`` in the basis tree."""
    parent = {(0, r): None}
    queue = deque([(0, r)])
    target = (1, s)
    while queue:
        node = queue.popleft()
        if node == target:
            break
        kind, k = node
        nbrs = row_adj[k] if kind == 0 else col_adj[k]
        for q in nbrs:
            nxt = (1 - kind, q)
            if nxt not in parent:
                parent[nxt] = node
                queue.append(nxt)
    path = []
    node = target
    while node is not None:
        path.append(node)
        node = parent[node]
    path.reverse()
    edges = []
    for p, q in zip(path[:-1], path[1:]):
        edges.append((p[1], q[1]) if p[0] == 0 else (q[1], p[1]))
    return edges


def solve_transport(a, b, C, max_iter: int | None = None) -> KPResult:
    """Minimize ``<C, P>`` over nonnegative ``P`` with row sums ``a`` and column sums ``b``.

    Empty rows and columns are removed before the simplex and re-inflated
    afterwards with dual values that keep the certificate feasible.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    C = np.asarray(C, dtype=float)
    sa, sb = a.sum(), b.sum()
    if np.any(a < 0) or np.any(b < 0):
        raise ValueError("marginals must be nonnegative")
    if abs(sa - sb) > MASS_TOL * max(1.0, sa, sb):
        raise MassMismatch(f"masses differ: {sa!r} vs {sb!r}")
    m_full, n_full = C.shape
    rows = np.flatnonzero(a > 0)
    cols = np.flatnonzero(b > 0)
    P_full = np.zeros((m_full, n_full))
    u_full = np.zeros(m_full)
    v_full = np.zeros(n_full)
    if len(rows) == 0 or len(cols) == 0:
        return KPResult(P_full, 0.0, *_inflate_duals(C, rows, cols, np.zeros(0), np.zeros(0)), 0)

    ar = a[rows]
    br = b[cols] * (sa / sb)
    Cr = C[np.ix_(rows, cols)]
    m, n = Cr.shape
    cells, X = _northwest(ar, br)
    row_adj = [set() for _ in range(m)]
    col_adj = [set() for _ in range(n)]
    for i, j in cells:
        row_adj[i].add(j)
        col_adj[j].add(i)
    eps = 1e-12 * max(1.0, float(np.abs(Cr).max()))
    if max_iter is None:
        max_iter = 50 * (m + n) * max(m, n) + 1000
    it = 0
    while True:
        u, v = _potentials(m, n, row_adj, col_adj, Cr)
        R = Cr - u[:, None] - v[None, :]
        cand = np.flatnonzero(R.ravel() < -eps)
        if len(cand) == 0:
            break
        if it >= max_iter:
            raise NoConvergence(f"transportation simplex exceeded {max_iter} pivots")
        it += 1
        r, s = divmod(int(cand[0]), n)
        edges = _tree_path(r, s, row_adj, col_adj)
        minus = edges[0::2]
        plus = edges[1::2]
        theta = min(X[e] for e in minus)
        leave = min(e for e in minus if X[e] == theta)
        for e in minus:
            X[e] -= theta
        for e in plus:
            X[e] += theta
        X[r, s] = theta
        X[leave] = 0.0
        row_adj[leave[0]].discard(leave[1])
        col_adj[leave[1]].discard(leave[0])
        row_adj[r].add(s)
        col_adj[s].add(r)

    np.maximum(X, 0.0, out=X)
    P_full[np.ix_(rows, cols)] = X
    u_full, v_full = _inflate_duals(C, rows, cols, u, v)
    return KPResult(P_full, float((C * P_full).sum()), u_full, v_full, it)


def _inflate_duals(C, rows, cols, u, v):
    m, n = C.shape
    uf = np.full(m, np.nan)
    vf = np.full(n, np.nan)
    uf[rows] = u
    vf[cols] = v
    if len(rows) == 0:
        uf[:] = 0.0
    empty_c = np.setdiff1d(np.arange(n), cols)
    if len(empty_c):
        vf[empty_c] = (C[np.ix_(rows, empty_c)] - uf[rows, None]).min(axis=0) if len(rows) else 0.0
    empty_r = np.setdiff1d(np.arange(m), rows)
    if len(empty_r):
        uf[empty_r] = (C[empty_r, :] - vf[None, :]).min(axis=1)
    return uf, vf


def solve_kp(c: CostField, mu1: DiscreteMeasure, mu2: DiscreteMeasure):
    """Exact Kantorovich problem; returns ``(plan, value)``."""
    plan, value, _, _ = solve_kp_certified(c, mu1, mu2)
    return plan, value


def solve_kp_certified(c: CostField, mu1: DiscreteMeasure, mu2: DiscreteMeasure):
    """Like :func:`solve_kp` but also returns the dual potentials ``(u, v)``."""
    check_same_grid(c.grid1, mu1.grid)
    check_same_grid(c.grid2, mu2.grid)
    _check_masses(mu1.mass, mu2.mass)
    res = solve_transport(mu1.w, mu2.w, c.c)
    return TransportPlan(c.grid1, c.grid2, res.P), res.value, res.u, res.v


def lp_tolerance(mass: float) -> float:
    return LP_TOL * max(1.0, mass)


def duality_gap(C, a, b, P, u, v):
    """``(primal - dual, max dual violation, max complementarity)``."""
    C = np.asarray(C)
    primal = float((C * P).sum())
    dual = float(np.dot(u, a) + np.dot(v, b))
    slack = C - u[:, None] - v[None, :]
    return primal - dual, float(max(0.0, -slack.min())), float(np.abs(slack * P).max())


def monotone_plan_1d(mu1: DiscreteMeasure, mu2: DiscreteMeasure) -> TransportPlan:
    """Comonotone coupling obtained by matching cumulative masses."""
    _check_masses(mu1.mass, mu2.mass)
    _, X = _northwest(mu1.w, mu2.w)
    return TransportPlan(mu1.grid, mu2.grid, X)


def wasserstein_beta(mu1: DiscreteMeasure, mu2: DiscreteMeasure, beta: float) -> float:
    if not beta >= 1:
        raise InvalidBeta(f"beta must be >= 1, got {beta}")
    plan = monotone_plan_1d(mu1, mu2)
    cost = np.abs(mu1.grid.centers[:, None] - mu2.grid.centers[None, :]) ** beta
    return float((cost * plan.P).sum()) ** (1.0 / beta)


def plan_distance_matrix(plan_a: TransportPlan, plan_b: TransportPlan, ia, ib):
    """Euclidean distances between product-grid cell centers ``ia`` of a and ``ib`` of b."""
    xa = np.stack([plan_a.grid1.centers[ia[0]], plan_a.grid2.centers[ia[1]]], axis=1)
    xb = np.stack([plan_b.grid1.centers[ib[0]], plan_b.grid2.centers[ib[1]]], axis=1)
    return np.sqrt(((xa[:, None, :] - xb[None, :, :]) ** 2).sum(axis=2))


def plan_w1(plan_a: TransportPlan, plan_b: TransportPlan) -> float:
    """Wasserstein-1 distance of two equal-mass plans on the product space.

    The ground metric is the Euclidean distance of cell-center pairs; the LP
    runs only over the nonzero entries of each plan.
    """
    _check_masses(plan_a.mass, plan_b.mass)
    ia = np.nonzero(plan_a.P)
    ib = np.nonzero(plan_b.P)
    D = plan_distance_matrix(plan_a, plan_b, ia, ib)
    return solve_transport(plan_a.P[ia], plan_b.P[ib], D).value
