"""Quadratically regularized Kantorovich problem.

For cell widths ``h1, h2`` the discrete problem reads

    min  sum(c * P) + gamma/2 * sum(P**2) / (h1 * h2)
    s.t. P >= 0,  P.sum(1) = rho1,  P.sum(0) = rho2,

i.e. the continuum functional evaluated on the piecewise constant density
``P / (h1 h2)``.  Its optimality system in the potentials ``(alpha1, alpha2)``
is ``P = h1 h2 / gamma * max(alpha1 + alpha2 - c, 0)`` together with the two
marginal equations, which is solved by a semismooth Newton method.  A
projected-gradient solver on the primal serves as fallback and as an
independent oracle.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import nnls

from .errors import MassMismatch, NoConvergence
from .exact_ot import CostField, TransportPlan
from .measure_core import DiscreteMeasure, _check_masses, _frozen, check_same_grid

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class DualPotentials:
    """Potentials with the gauge ``alpha2.mean() == 0``."""

    alpha1: np.ndarray = field(repr=False)
    alpha2: np.ndarray = field(repr=False)
    gauge: str = "mean(alpha2)=0"

    def __post_init__(self):
        a1, a2 = _gauge(np.asarray(self.alpha1, float), np.asarray(self.alpha2, float))
        if not (np.all(np.isfinite(a1)) and np.all(np.isfinite(a2))):
            raise ValueError("potentials must be finite")
        object.__setattr__(self, "alpha1", _frozen(a1))
        object.__setattr__(self, "alpha2", _frozen(a2))


def _gauge(a1, a2):
    t = a2.mean()
    return a1 + t, a2 - t


@dataclass(frozen=True)
class RegSolution:
    plan: TransportPlan
    potentials: DualPotentials
    gamma: float
    residual_norm: float
    iterations: int
    method: str  # "SSN" or "PG"
    trace: tuple = ()


@dataclass
class SolverOptions:
    tol: float = 1e-10
    max_iter: int = 100
    method: str = "ssn"  # "ssn" or "pg"
    armijo: float = 1e-4
    shrink: float = 0.5
    max_backtracks: int = 40
    pg_tol: float = 1e-12
    pg_max_iter: int = 200_000


def _scale(c: CostField, gamma: float) -> float:
    return c.grid1.h * c.grid2.h / gamma


def reg_objective(plan: TransportPlan, c: CostField, gamma: float) -> float:
    hh = plan.grid1.h * plan.grid2.h
    return float((c.c * plan.P).sum() + 0.5 * gamma * (plan.P**2).sum() / hh)


def l2_norm_sq(plan: TransportPlan) -> float:
    """Squared L2 norm of the plan's piecewise constant density."""
    return float((plan.P**2).sum() / (plan.grid1.h * plan.grid2.h))


def _primal(C, a1, a2, s):
    return s * np.maximum(a1[:, None] + a2[None, :] - C, 0.0)


def primal_from_dual(pot: DualPotentials, c: CostField, gamma: float) -> TransportPlan:
    if not gamma > 0:
        raise ValueError("gamma must be positive")
    P = _primal(c.c, pot.alpha1, pot.alpha2, _scale(c, gamma))
    return TransportPlan(c.grid1, c.grid2, P)


def _residual(P, r1, r2):
    return np.concatenate([P.sum(axis=1) - r1, P.sum(axis=0) - r2])


def reg_residual(pot: DualPotentials, c: CostField, rho1: DiscreteMeasure, rho2: DiscreteMeasure, gamma: float) -> np.ndarray:
    """Marginal defects of ``primal_from_dual(pot)``: rows first, then columns."""
    P = primal_from_dual(pot, c, gamma).P
    return _residual(P, rho1.w, rho2.w)


# ---------------------------------------------------------------------------
# semismooth Newton


def _newton_step(C, a1, a2, s, F):
    m1, m2 = C.shape
    sigma = (a1[:, None] + a2[None, :] - C > 0).astype(float)
    deg1 = sigma.sum(axis=1)
    deg2 = sigma.sum(axis=0)
    n = m1 + m2
    K = np.zeros((n + 1, n + 1))
    # isolated nodes get a unit pseudo-degree so the step pushes them into play
    K[np.arange(m1), np.arange(m1)] = s * np.where(deg1 > 0, deg1, 1.0)
    K[m1 + np.arange(m2), m1 + np.arange(m2)] = s * np.where(deg2 > 0, deg2, 1.0)
    K[:m1, m1:n] = s * sigma
    K[m1:n, :m1] = s * sigma.T
    K[m1:n, n] = 1.0 / m2
    K[n, m1:n] = 1.0 / m2
    K[np.arange(n), np.arange(n)] += 1e-12 * s
    rhs = np.concatenate([-F, [-a2.mean()]])
    try:
        d = np.linalg.solve(K, rhs)
    except np.linalg.LinAlgError:
        d = np.linalg.lstsq(K, rhs, rcond=None)[0]
    return d[:m1], d[m1:n]


def _dual_value(C, a1, a2, s, r1, r2):
    return float(a1 @ r1 + a2 @ r2 - 0.5 * s * (np.maximum(a1[:, None] + a2[None, :] - C, 0.0) ** 2).sum())


def _ascent_step(C, a1, a2, s, r1, r2, F, opts):
    """Backtracked gradient ascent on the concave dual; used when Newton stalls."""
    m1, m2 = C.shape
    tau = 1.0 / (s * max(m1, m2))
    d0 = _dual_value(C, a1, a2, s, r1, r2)
    g2 = float(F @ F)
    for _ in range(opts.max_backtracks):
        b1, b2 = a1 - tau * F[:m1], a2 - tau * F[m1:]
        if _dual_value(C, b1, b2, s, r1, r2) >= d0 + opts.armijo * tau * g2:
            return _gauge(b1, b2)
        tau *= opts.shrink
    return _gauge(a1 - tau * F[:m1], a2 - tau * F[m1:])


def _ssn(C, r1, r2, s, a1, a2, opts):
    """Semismooth Newton on the marginal equations. Returns (a1, a2, res, iters, trace).

    A step is accepted on sufficient decrease of ``0.5*|F|^2`` or, failing
    that, on Armijo ascent of the concave dual, for which the Newton
    direction is always an ascent direction.
    """
    a1, a2 = _gauge(a1.copy(), a2.copy())
    F = _residual(_primal(C, a1, a2, s), r1, r2)
    res = float(np.abs(F).max())
    trace = [res]
    it = 0
    while res > opts.tol and it < opts.max_iter:
        it += 1
        d1, d2 = _newton_step(C, a1, a2, s, F)
        merit = 0.5 * float(F @ F)
        dual0 = _dual_value(C, a1, a2, s, r1, r2)
        slope = -float(F[: len(a1)] @ d1 + F[len(a1) :] @ d2)
        t = 1.0
        accepted = False
        for _ in range(opts.max_backtracks):
            b1, b2 = a1 + t * d1, a2 + t * d2
            Fn = _residual(_primal(C, b1, b2, s), r1, r2)
            if 0.5 * float(Fn @ Fn) <= (1.0 - 2.0 * opts.armijo * t) * merit:
                accepted = True
                break
            if slope > 0 and _dual_value(C, b1, b2, s, r1, r2) >= dual0 + opts.armijo * t * slope:
                accepted = True
                break
            t *= opts.shrink
        if accepted:
            a1, a2 = _gauge(b1, b2)
        else:
            a1, a2 = _ascent_step(C, a1, a2, s, r1, r2, F, opts)
        F = _residual(_primal(C, a1, a2, s), r1, r2)
        res = float(np.abs(F).max())
        trace.append(res)
    return a1, a2, res, it, trace


def _initial_potentials(C):
    return C.mean(axis=1), np.zeros(C.shape[1])


# ---------------------------------------------------------------------------
# projected gradient (primal)


NNLS_MAX_VARS = 2500


def _penalized_nnls(Y, r1, r2, weight=1e6):
    # active-set solve of min |x - y|^2 + weight^2 |A x - b|^2 over x >= 0
    m1, m2 = Y.shape
    A = np.vstack([np.kron(np.eye(m1), np.ones(m2)), np.kron(np.ones(m1), np.eye(m2))])
    lhs = np.vstack([np.eye(m1 * m2), weight * A])
    rhs = np.concatenate([Y.ravel(), weight * np.concatenate([r1, r2])])
    x, _ = nnls(lhs, rhs, maxiter=50 * m1 * m2)
    return x.reshape(m1, m2)


def _polish_projection(Y, X, r1, r2, tol):
    """Exact projection on the positive pattern of ``X``, or ``None`` if KKT fails.

    With the free set fixed the projection is an equality-constrained least
    squares problem, ``X = Y + u (+) v`` on the free cells; the candidate is
    accepted only with nonnegative entries, nonpositive ``Y + u (+) v`` off the
    free set and marginals within ``tol``.
    """
    m1, m2 = Y.shape
    F = X > 0
    YF = np.where(F, Y, 0.0)
    M = np.zeros((m1 + m2, m1 + m2))
    M[:m1, :m1] = np.diag(F.sum(axis=1))
    M[m1:, m1:] = np.diag(F.sum(axis=0))
    M[:m1, m1:] = F
    M[m1:, :m1] = F.T
    rhs = np.concatenate([r1 - YF.sum(axis=1), r2 - YF.sum(axis=0)])
    lam = np.linalg.lstsq(M, rhs, rcond=None)[0]
    Z = Y + lam[:m1, None] + lam[None, m1:]
    # one step of iterative refinement against rounding in the solve
    ZF = np.where(F, Z, 0.0)
    rhs = np.concatenate([r1 - ZF.sum(axis=1), r2 - ZF.sum(axis=0)])
    lam = np.linalg.lstsq(M, rhs, rcond=None)[0]
    Z = Z + lam[:m1, None] + lam[None, m1:]
    scale = max(1.0, float(np.abs(Y).max()))
    if Z[F].min(initial=0.0) < -tol or Z[~F].max(initial=0.0) > tol * scale:
        return None
    Xp = np.where(F, np.maximum(Z, 0.0), 0.0)
    defect = max(np.abs(Xp.sum(axis=1) - r1).max(), np.abs(Xp.sum(axis=0) - r2).max())
    return Xp if defect <= tol else None


def project_transport_polytope(Y, r1, r2, tol=1e-12, max_iter=200_000):
    """Euclidean projection of ``Y`` onto ``{X >= 0, X.sum(1) = r1, X.sum(0) = r2}``.

    The positive pattern is identified by a penalized nonnegative least
    squares solve and the projection is then computed exactly on it; if that
    candidate fails the KKT check, Dykstra's alternating projections between
    the affine marginal set (closed form) and the nonnegative orthant take
    over, with the same exact finish once their pattern settles. Returns
    ``(X, iterations, converged)``.
    """
    m1, m2 = Y.shape
    if m1 * m2 <= NNLS_MAX_VARS:
        Xp = _polish_projection(Y, _penalized_nnls(Y, r1, r2), r1, r2, tol)
        if Xp is not None:
            return Xp, 0, True
    total = r1.sum()

    def affine(Z):
        dr = r1 - Z.sum(axis=1)
        dc = r2 - Z.sum(axis=0)
        return Z + dr[:, None] / m2 + (dc - (total - Z.sum()) / m2)[None, :] / m1

    X = Y.copy()
    p = np.zeros_like(Y)
    q = np.zeros_like(Y)
    pattern = None
    for it in range(1, max_iter + 1):
        Z = affine(X + p)
        p = X + p - Z
        Xn = np.maximum(Z + q, 0.0)
        q = Z + q - Xn
        step = float(np.abs(Xn - X).max())
        X = Xn
        if step <= tol:
            defect = max(np.abs(X.sum(axis=1) - r1).max(), np.abs(X.sum(axis=0) - r2).max())
            if defect <= tol:
                return X, it, True
        if it % 10 == 0:
            now = X > 0
            if pattern is not None and np.array_equal(now, pattern):
                Xp = _polish_projection(Y, X, r1, r2, tol)
                if Xp is not None:
                    return Xp, it, True
            pattern = now
    return X, max_iter, False


def pg_solve(C, r1, r2, s, tol=1e-12, max_iter=200_000):
    """Projected gradient with step ``1/L``, ``L = 1/s``, on the primal QP.

    With this step length the gradient step maps every iterate to ``-s*C``,
    so one certified projection is already the solution; the loop repeats
    only when the projection comes back uncertified. Returns ``(P, iterations, ok)``.
    """
    X = np.outer(r1, r2) / max(r1.sum(), np.finfo(float).tiny)
    total_it = 0
    ok = False
    for _ in range(5):
        G = C + X / s
        Xn, it, ok = project_transport_polytope(X - s * G, r1, r2, tol, max_iter)
        total_it += it
        done = float(np.abs(Xn - X).max()) <= tol
        X = Xn
        if ok or done:
            break
    return X, total_it, ok


def potentials_from_plan(C, P, s):
    """Least-squares potentials consistent with ``P`` on its support."""
    m1, m2 = C.shape
    rows, cols = np.nonzero(P > 0)
    A = np.zeros((len(rows) + 1, m1 + m2))
    A[np.arange(len(rows)), rows] = 1.0
    A[np.arange(len(rows)), m1 + cols] = 1.0
    A[-1, m1:] = 1.0 / m2
    rhs = np.concatenate([C[rows, cols] + P[rows, cols] / s, [0.0]])
    sol = np.linalg.lstsq(A, rhs, rcond=None)[0]
    a1, a2 = sol[:m1], sol[m1:]
    # rows/columns without support: keep every entry inactive
    margin = 1e-9 * (1.0 + float(np.abs(C).max()))
    empty_c = ~np.isin(np.arange(m2), cols)
    if empty_c.any() and len(rows):
        a2[empty_c] = (C[:, empty_c] - a1[:, None]).min(axis=0) - margin
    empty_r = ~np.isin(np.arange(m1), rows)
    if empty_r.any():
        a1[empty_r] = (C[empty_r, :] - a2[None, :]).min(axis=1) - margin
    return a1, a2


def _pg_path(C, r1, r2, s, opts, a1_init=None, a2_init=None):
    """PG solve, potential recovery and a Newton polish on the positive block."""
    P, pg_it, ok = pg_solve(C, r1, r2, s, opts.pg_tol, opts.pg_max_iter)
    a1, a2 = potentials_from_plan(C, P, s)
    rows = np.flatnonzero(r1 > 0)
    cols = np.flatnonzero(r2 > 0)
    sub = np.ix_(rows, cols)
    b1, b2, res, it, trace = _ssn(C[sub], r1[rows], r2[cols], s, a1[rows], a2[cols], opts)
    a1[rows] = b1
    a2[cols] = b2
    margin = 1e-9 * (1.0 + float(np.abs(C).max()))
    empty_c = np.setdiff1d(np.arange(C.shape[1]), cols)
    if len(empty_c) and len(rows):
        a2[empty_c] = (C[np.ix_(rows, empty_c)] - a1[rows, None]).min(axis=0) - margin
    empty_r = np.setdiff1d(np.arange(C.shape[0]), rows)
    if len(empty_r):
        a1[empty_r] = (C[empty_r, :] - a2[None, :]).min(axis=1) - margin
    return a1, a2, pg_it + it, trace


def solve_reg(c: CostField, mu1: DiscreteMeasure, mu2: DiscreteMeasure, gamma: float, opts: SolverOptions | None = None, init: DualPotentials | None = None) -> RegSolution:
    """Solution operator of the regularized Kantorovich problem.

    Strictly positive marginals go through semismooth Newton; otherwise, or
    if Newton fails or ``opts.method == "pg"``, the projected gradient path
    is taken and its potentials are polished by Newton.
    """
    opts = opts or SolverOptions()
    if not gamma > 0:
        raise ValueError("gamma must be positive")
    check_same_grid(c.grid1, mu1.grid)
    check_same_grid(c.grid2, mu2.grid)
    _check_masses(mu1.mass, mu2.mass)
    return _solve_arrays(c, mu1.w, mu2.w, gamma, opts, init)


def _solve_arrays(c: CostField, r1, r2, gamma, opts, init=None) -> RegSolution:
    """Core of :func:`solve_reg` on raw marginal arrays (no validation)."""
    C = c.c
    s = _scale(c, gamma)
    if abs(r1.sum() - r2.sum()) > 1e-10 * max(1.0, abs(r1.sum())):
        raise MassMismatch(f"masses differ: {r1.sum()!r} vs {r2.sum()!r}")
    trace = []
    method = opts.method.lower()
    positive = bool(np.all(r1 > 0) and np.all(r2 > 0))
    if method == "ssn" and positive:
        a1, a2 = (init.alpha1, init.alpha2) if init is not None else _initial_potentials(C)
        a1, a2, res, it, trace = _ssn(C, r1, r2, s, np.array(a1), np.array(a2), opts)
        if res <= opts.tol:
            return _pack(c, r1, r2, a1, a2, gamma, it, "SSN", trace)
        log.info("SSN stopped at residual %.3e after %d iterations; PG fallback", res, it)
    elif method not in ("ssn", "pg"):
        raise ValueError(f"unknown method {opts.method!r}")
    a1, a2, it, pg_trace = _pg_path(C, r1, r2, s, opts)
    trace = list(trace) + list(pg_trace)
    res = float(np.abs(_residual(_primal(C, a1, a2, s), r1, r2)).max())
    if res > opts.tol:
        raise NoConvergence(f"SSN and PG both failed, residual {res:.3e}", trace)
    return _pack(c, r1, r2, a1, a2, gamma, it, "PG", trace)


def _pack(c, r1, r2, a1, a2, gamma, it, method, trace):
    pot = DualPotentials(a1, a2)
    plan = primal_from_dual(pot, c, gamma)
    res = float(np.abs(_residual(plan.P, r1, r2)).max())
    return RegSolution(plan, pot, float(gamma), res, int(it), method, tuple(trace))
