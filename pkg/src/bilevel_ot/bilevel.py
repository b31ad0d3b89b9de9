"""Bilevel marginal identification and optimal control on top of the regularized KP.

The upper level chooses the first marginal ``mu1`` among probability measures
supported on a mask of cells away from the boundary; the lower level is the
regularized Kantorovich problem between the mollified-and-shifted marginals.
Driving ``(gamma, delta) -> 0`` along a schedule and watching the iterates is
the convergence study.
"""

from __future__ import annotations

import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from functools import cached_property

import numpy as np
from scipy.optimize import minimize_scalar, nnls

from .errors import (
    EmptyMask,
    InvalidBeta,
    InvalidExponent,
    InvalidRatio,
    NoConvergence,
    NoProgress,
)
from .exact_ot import (
    CostField,
    TransportPlan,
    check_coupling,
    monotone_plan_1d,
    plan_w1,
    solve_kp,
)
from .measure_core import (
    DiscreteMeasure,
    Grid,
    SupportMask,
    _frozen,
    check_same_grid,
    extend_by_zero,
    extend_grid,
    block_offset,
    mollify_shift,
    mollify_shift_weights,
    support_distance,
    w1_1d,
)
from .pde import PoissonOperator, dual_norm, solve_poisson
from .reg_ot import DualPotentials, RegSolution, SolverOptions, _solve_arrays

log = logging.getLogger(__name__)

VARIANTS = ("MI_TV", "MI_DUAL", "OCP")
VERDICTS = ("FEASIBLE_LIMIT", "OPTIMAL_LIMIT", "INCONCLUSIVE")


# ---------------------------------------------------------------------------
# schedules


@dataclass(frozen=True)
class Schedule:
    """Paired regularization and smoothing parameters.

    ``gammas`` decrease strictly, ``deltas`` never increase and stay at most
    ``rho``, and the coupling ratio ``gamma_n / delta_n**d`` decreases strictly.
    """

    gammas: tuple
    deltas: tuple
    d: int
    rho: float

    def __post_init__(self):
        g = tuple(float(x) for x in self.gammas)
        dl = tuple(float(x) for x in self.deltas)
        if len(g) != len(dl) or not g:
            raise ValueError("need equally many gammas and deltas, at least one")
        if int(self.d) != self.d or self.d < 1:
            raise ValueError("d must be a positive integer")
        if min(g) <= 0 or min(dl) <= 0:
            raise ValueError("gammas and deltas must be positive")
        if max(dl) > self.rho * (1 + 1e-12):
            raise ValueError(f"delta exceeds rho={self.rho}")
        ratio = [a / b**self.d for a, b in zip(g, dl)]
        for name, seq, strict in (("gamma", g, True), ("delta", dl, False), ("coupling ratio", ratio, True)):
            for p, q in zip(seq, seq[1:]):
                if q > p or (strict and q == p):
                    raise ValueError(f"{name} sequence is not decreasing: {p} -> {q}")
        object.__setattr__(self, "gammas", g)
        object.__setattr__(self, "deltas", dl)
        object.__setattr__(self, "d", int(self.d))
        object.__setattr__(self, "rho", float(self.rho))

    @property
    def entries(self) -> list[tuple[float, float]]:
        return list(zip(self.gammas, self.deltas))

    @property
    def coupling(self) -> np.ndarray:
        return np.array(self.gammas) / np.array(self.deltas) ** self.d

    def __len__(self):
        return len(self.gammas)

    def __iter__(self):
        return iter(self.entries)


def make_schedule(gamma0: float, ratio: float, n_max: int, d: int, rho: float) -> Schedule:
    """``gamma_n = gamma0 ratio**n`` and ``delta_n = min(rho, gamma_n**(1/(2d)))``, n = 1..n_max."""
    if not 0 < ratio < 1:
        raise InvalidRatio(f"ratio must lie in (0, 1), got {ratio}")
    if not gamma0 > 0 or n_max < 1:
        raise ValueError("need gamma0 > 0 and n_max >= 1")
    gammas = [gamma0 * ratio**n for n in range(1, n_max + 1)]
    deltas = [min(rho, g ** (1.0 / (2 * d))) for g in gammas]
    return Schedule(tuple(gammas), tuple(deltas), d, rho)


# ---------------------------------------------------------------------------
# instances


@dataclass(frozen=True)
class ObjectiveSpec:
    """Upper-level objective.

    ``MI_TV`` and ``MI_DUAL`` need ``pi_d`` (array of plan masses, weighted
    by ``plan_weight``) and ``mu1_d`` when ``nu > 0``; ``OCP`` needs the observation ``y_d`` (values
    at the cell centers of the first grid).  ``oracle_value`` optionally
    records a known optimal value of the unregularized problem.
    """

    variant: str
    nu: float = 0.0
    pi_d: np.ndarray | None = field(default=None, repr=False)
    mu1_d: np.ndarray | None = field(default=None, repr=False)
    y_d: np.ndarray | None = field(default=None, repr=False)
    beta: float = 2.0
    p_prime: float = 2.0
    plan_weight: float = 1.0
    oracle_value: float | None = None

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown objective variant {self.variant!r}")
        if not self.nu >= 0:
            raise ValueError("nu must be nonnegative")
        if not self.beta > 1:
            raise InvalidBeta(f"beta must exceed 1, got {self.beta}")
        if self.variant == "MI_DUAL" and not 1 < self.p_prime <= 2:
            raise InvalidExponent(f"p' must lie in (1, 2], got {self.p_prime}")
        for name in ("pi_d", "mu1_d", "y_d"):
            val = getattr(self, name)
            if val is not None:
                object.__setattr__(self, name, _frozen(val))
        if self.variant == "OCP" and self.y_d is None:
            raise ValueError("OCP objective needs y_d")
        if not self.plan_weight >= 0:
            raise ValueError("plan_weight must be nonnegative")
        if self.variant != "OCP":
            if self.pi_d is None and self.plan_weight > 0:
                raise ValueError(f"{self.variant} objective needs pi_d")
            if self.nu > 0 and self.mu1_d is None:
                raise ValueError("nu > 0 needs mu1_d")

    @property
    def weak_star_continuous(self) -> bool:
        # the TV penalty is only lower semicontinuous
        if self.variant == "OCP":
            return True
        return self.variant == "MI_DUAL" and self.nu == 0


@dataclass(frozen=True)
class BilevelInstance:
    grid1: Grid
    grid2: Grid
    mu2_d: DiscreteMeasure
    cost: CostField
    mask: SupportMask
    objective: ObjectiveSpec

    def __post_init__(self):
        check_same_grid(self.mu2_d.grid, self.grid2)
        check_same_grid(self.cost.grid1, self.grid1)
        check_same_grid(self.cost.grid2, self.grid2)
        check_same_grid(self.mask.grid, self.grid1)
        if abs(self.mu2_d.mass - 1.0) > 1e-10:
            raise ValueError(f"mu2_d must be a probability measure, mass {self.mu2_d.mass}")
        if support_distance(self.mu2_d) < self.rho - 1e-12 * self.grid2.length:
            raise ValueError("mu2_d is supported closer than rho to the boundary")
        obj = self.objective
        shapes = {"pi_d": (self.grid1.m, self.grid2.m), "mu1_d": (self.grid1.m,), "y_d": (self.grid1.m,)}
        for name, shape in shapes.items():
            val = getattr(obj, name)
            if val is not None and val.shape != shape:
                raise ValueError(f"objective {name} has shape {val.shape}, expected {shape}")
        if obj.variant == "OCP" and self.cost.beta is not None and abs(self.cost.beta - obj.beta) > 1e-12:
            raise ValueError("OCP beta differs from the cost exponent")

    @property
    def rho(self) -> float:
        return self.mask.rho

    @cached_property
    def poisson(self) -> PoissonOperator:
        return PoissonOperator(self.grid1)

    def theorem_hypotheses(self) -> dict:
        w = self.mu2_d.w
        supp = self.mu2_d.support()
        # strictly positive density on a support that is one contiguous block
        idx = np.flatnonzero(supp)
        contiguous = len(idx) > 0 and idx[-1] - idx[0] + 1 == len(idx)
        return {
            "convex_difference_cost": self.cost.convex_difference,
            "mu2_d_positive_density": bool(contiguous and np.all(w[supp] > 0)),
            "weak_star_continuous_objective": self.objective.weak_star_continuous,
        }

    def extended(self, rho_ext: float) -> "BilevelInstance":
        """Same problem on grids enlarged by ``rho_ext``, data extended by zero.

        The mask of the enlarged instance is the set of original cells when
        ``rho_ext`` is added to the original support distance.
        """
        g1 = extend_grid(self.grid1, rho_ext)
        g2 = extend_grid(self.grid2, rho_ext)
        k1 = block_offset(g1, self.grid1)
        k2 = block_offset(g2, self.grid2)
        obj = self.objective
        pad = {}
        if obj.pi_d is not None:
            pad["pi_d"] = np.pad(obj.pi_d, ((k1, k1), (k2, k2)))
        if obj.mu1_d is not None:
            pad["mu1_d"] = np.pad(obj.mu1_d, k1)
        if obj.y_d is not None:
            raise ValueError("the Poisson observation does not extend by zero")
        cost = (
            CostField.power(g1, g2, self.cost.beta)
            if self.cost.beta is not None
            else CostField(g1, g2, np.pad(self.cost.c, ((k1, k1), (k2, k2)), mode="edge"))
        )
        return BilevelInstance(
            g1,
            g2,
            extend_by_zero(self.mu2_d, rho_ext),
            cost,
            SupportMask.from_rho(g1, self.rho + rho_ext),
            replace(obj, **pad),
        )


# ---------------------------------------------------------------------------
# masked simplex


def _project_simplex(v, mass):
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - mass
    k = np.arange(1, len(u) + 1)
    r = np.flatnonzero(u - css / k > 0)[-1]
    return np.maximum(v - css[r] / (r + 1), 0.0)


def simplex_project(w, mask: SupportMask, target_mass: float = 1.0) -> DiscreteMeasure:
    """Euclidean projection onto masked nonnegative vectors of the given total."""
    w = np.asarray(w, float)
    if w.shape != (mask.grid.m,):
        raise ValueError("length of w does not match the mask grid")
    if not mask.allowed.any():
        raise EmptyMask("no admissible cell")
    out = np.zeros_like(w)
    out[mask.allowed] = _project_simplex(w[mask.allowed], target_mass)
    return DiscreteMeasure(mask.grid, out)


# ---------------------------------------------------------------------------
# objectives


def _tv(a, b) -> float:
    return float(np.abs(a - b).sum())


def ocp_fit(inst: BilevelInstance, mu1_w) -> float:
    """``0.5 ||G mu1 - y_d||^2_{L2}`` with midpoint quadrature."""
    y = solve_poisson(inst.poisson, mu1_w)
    return 0.5 * inst.grid1.h * float(((y - inst.objective.y_d) ** 2).sum())


def _ocp_fit_grad(inst, mu1_w):
    op = inst.poisson
    y = solve_poisson(op, mu1_w)
    return op.solve_density(y - inst.objective.y_d)


def objective_value(inst: BilevelInstance, mu1_w, P) -> float:
    """Upper-level objective at cell masses ``mu1_w`` and plan masses ``P``."""
    obj = inst.objective
    if obj.variant == "OCP":
        return ocp_fit(inst, mu1_w) + obj.nu * float((inst.cost.c * P).sum())
    tv = obj.nu * _tv(mu1_w, obj.mu1_d) if obj.nu > 0 else 0.0
    if obj.plan_weight == 0:
        return tv
    if obj.variant == "MI_TV":
        return obj.plan_weight * _tv(P, obj.pi_d) + tv
    eta = np.asarray(P).sum(axis=1) - obj.pi_d.sum(axis=1)
    return obj.plan_weight * dual_norm(inst.poisson, eta, obj.p_prime) ** obj.p_prime + tv


class _Lower:
    """Regularized lower level at fixed ``(gamma, delta)`` with warm starts."""

    def __init__(self, inst: BilevelInstance, gamma: float, delta: float, solver: SolverOptions):
        if delta > inst.rho * (1 + 1e-12):
            raise ValueError(f"delta={delta} exceeds rho={inst.rho}")
        self.inst = inst
        self.gamma = gamma
        self.delta = delta
        self.solver = solver
        self.r2 = mollify_shift(inst.mu2_d, delta).w
        self.init: DualPotentials | None = None
        self.ssn_iters = 0
        self.calls = 0

    def solve(self, mu1_w) -> RegSolution:
        r1 = mollify_shift_weights(mu1_w, self.inst.grid1, self.delta)
        try:
            sol = _solve_arrays(self.inst.cost, r1, self.r2, self.gamma, self.solver, self.init)
        except NoConvergence:
            if self.init is None:
                raise
            sol = _solve_arrays(self.inst.cost, r1, self.r2, self.gamma, self.solver, None)
        self.init = sol.potentials
        self.ssn_iters += sol.iterations
        self.calls += 1
        return sol

    def value(self, mu1_w) -> float:
        return objective_value(self.inst, mu1_w, self.solve(mu1_w).plan.P)


def reduced_objective(mu1: DiscreteMeasure, gamma: float, delta: float, inst: BilevelInstance, solver: SolverOptions | None = None):
    """``(J, plan)`` with ``plan = S_gamma(c_d, T^delta mu1, T^delta mu2_d)``."""
    check_same_grid(mu1.grid, inst.grid1)
    if abs(mu1.mass - 1.0) > 1e-10:
        raise ValueError("mu1 must be a probability measure")
    if not inst.mask.admits(mu1):
        raise ValueError("mu1 charges cells outside the mask")
    low = _Lower(inst, gamma, delta, solver or SolverOptions())
    mollify_shift(mu1, delta)  # support check
    plan = low.solve(mu1.w).plan
    return objective_value(inst, mu1.w, plan.P), plan


def exact_objective(mu1: DiscreteMeasure, inst: BilevelInstance):
    """Objective of the unregularized problem; ``(J, plan)``.

    With a strictly convex difference cost the optimal plan is unique and is
    the monotone coupling; otherwise a basic optimal plan of the LP is used.
    """
    if inst.cost.convex_difference:
        plan = monotone_plan_1d(mu1, inst.mu2_d)
    else:
        plan, _ = solve_kp(inst.cost, mu1, inst.mu2_d)
    return objective_value(inst, mu1.w, plan.P), plan


# ---------------------------------------------------------------------------
# upper level search


@dataclass
class BKOptions:
    stat_tol: float = 1e-6
    fd_step: float = 1e-5
    n_starts: int = 5
    seed: int = 0
    max_iter: int = 200
    armijo: float = 1e-4
    sample_radius: float = 1e-4
    min_radius: float = 1e-7
    strict: bool = False
    solver: SolverOptions = field(default_factory=lambda: SolverOptions(tol=1e-12))


@dataclass
class BKResult:
    mu1: DiscreteMeasure
    plan: TransportPlan
    J: float
    stationarity: float
    starts: list  # (J at start, J at end) per start
    ssn_iters: int
    solution: RegSolution | None = None

    def __iter__(self):
        return iter((self.mu1, self.plan, self.J))


def _curvature(inst):
    # between kinks the OCP objective is the Poisson fit plus a linear term
    mask = inst.mask.allowed
    if inst.objective.variant != "OCP":
        return None
    Ginv = np.linalg.inv(inst.poisson.matrix)
    return (Ginv @ Ginv)[np.ix_(mask, mask)] / inst.grid1.h


def starting_points(inst: BilevelInstance, n_starts: int, seed: int) -> list[np.ndarray]:
    """Uniform on the mask, projected ``mu2_d``, then seeded Dirichlet draws."""
    mask = inst.mask.allowed
    k = int(mask.sum())
    pts = [np.full(k, 1.0 / k)]
    if inst.grid2.same_as(inst.grid1):
        pts.append(_project_simplex(inst.mu2_d.w[mask], 1.0))
    rng = np.random.default_rng(seed)
    while len(pts) < n_starts:
        pts.append(rng.dirichlet(np.ones(k)))
    return pts[:n_starts]


def _tangent_grad(f, x, eps):
    k = len(x)
    g = np.empty(k)
    for i in range(k):
        d = -np.full(k, 1.0 / k)
        d[i] += 1.0
        g[i] = (f(x + eps * d) - f(x - eps * d)) / (2 * eps)
    return g


def _stationarity(x, g):
    return float(np.linalg.norm(x - _project_simplex(x - g, 1.0)))


def _pg_polish(f, x, fx, g, opts, eps):
    """Projected gradient with Armijo backtracking until stationary or stuck."""
    t = 1.0
    chi = _stationarity(x, g)
    for _ in range(opts.max_iter):
        if chi <= opts.stat_tol:
            break
        while True:
            xn = _project_simplex(x - t * g, 1.0)
            fn = f(xn)
            if fn <= fx - opts.armijo / t * float(np.dot(x - xn, x - xn)) or t < 1e-12:
                break
            t *= 0.5
        if t < 1e-12:
            break
        x, fx = xn, fn
        g = _tangent_grad(f, x, eps)
        chi = _stationarity(x, g)
        t = min(1.0, 2 * t)
    return x, fx, g, chi


def _min_norm_hull(G):
    """Smallest-norm convex combination of the columns of ``G``."""
    w = 1e6 * max(1.0, float(np.abs(G).max()))
    A = np.vstack([G, np.full((1, G.shape[1]), w)])
    b = np.zeros(A.shape[0])
    b[-1] = w
    lam, _ = nnls(A, b)
    lam /= lam.sum()
    return G @ lam


def _face_basis(nf):
    # orthonormal basis of {v in R^nf : sum v = 0}
    q, _ = np.linalg.qr(np.eye(nf) - 1.0 / nf, mode="reduced")
    return q[:, : nf - 1]


def _gs_polish(f, x, fx, opts, H=None, sample=True):
    """Gradient sampling on the active face: the objective is only piecewise smooth.

    ``H`` is an optional curvature model on the mask coordinates used as the
    step metric.  Returns ``(x, fx, chi)`` where ``chi`` is the norm of the
    smallest convex combination of the projected gradients sampled at the
    last radius (the finite-difference projected gradient norm wherever the
    objective is smooth).
    """
    rng = np.random.default_rng(opts.seed)
    k = len(x)
    H = np.eye(k) if H is None else np.asarray(H)
    r = opts.sample_radius
    chi = math.inf
    for _ in range(opts.max_iter):
        eps = min(opts.fd_step, r / 10)
        free = x > 1e-14
        nf = int(free.sum())
        g0 = _tangent_grad(f, x, eps)
        bound = float(max(0.0, (g0[free].mean() - g0[~free]).max())) if nf < k else 0.0
        if nf == 1:
            chi = bound
            if chi <= opts.stat_tol:
                break
            moved = False
        else:
            Z = _face_basis(nf)
            grads = [g0]
            for _ in range(nf if sample else 0):
                u = np.zeros(k)
                u[free] = Z @ rng.standard_normal(nf - 1)
                u *= r / max(np.linalg.norm(u), 1e-300)
                neg = (x + u < 0) & free
                scale = float(np.min(x[neg] / -u[neg])) if neg.any() else 1.0
                grads.append(_tangent_grad(f, x + scale * u, eps))
            G = np.stack([Z.T @ g[free] for g in grads], axis=1)
            chi = max(float(np.linalg.norm(_min_norm_hull(G))), bound)
            log.debug("gs r=%.1e chi=%.3e bound=%.3e nf=%d f=%.15e", r, chi, bound, nf, fx)
            if chi <= opts.stat_tol and (r <= opts.sample_radius * 1e-2 or not sample):
                break
            M = Z.T @ H[np.ix_(free, free)] @ Z
            M += 1e-10 * max(1.0, np.trace(M) / len(M)) * np.eye(len(M))
            Lc = np.linalg.cholesky(M)
            dt = _min_norm_hull(np.linalg.solve(Lc, G))
            step = np.zeros(k)
            step[free] = Z @ np.linalg.solve(Lc.T, dt)  # metric steepest descent, negated
            slope = float(dt @ dt)
            pos = step > 0
            t = min(1.0, float(np.min(x[pos] / step[pos]))) if pos.any() else 1.0
            moved = False
            while t > 1e-12 and slope > 0:
                xn = x - t * step
                fn = f(xn)
                # strict decrease too: on flat faces the Armijo margin rounds away
                if fn <= fx - opts.armijo * t * slope and fn < fx:
                    moved = True
                    break
                t *= 0.5
        if not moved and bound > 0:
            xn, fn, _, _ = _pg_polish(f, x, fx, g0, replace(opts, max_iter=1, stat_tol=0.0), eps)
            moved = fn < fx
        if moved:
            xn = np.maximum(xn, 0.0)
            x, fx = xn / xn.sum(), fn
        elif sample and r > opts.min_radius * 1.5:
            r *= 0.1
        else:
            break
    return x, fx, chi


def _search(f, x0, opts, H):
    """Metric descent from one start, without gradient sampling."""
    x = np.array(x0, float)
    return _gs_polish(f, x, f(x), opts, H, sample=False)


def solve_bk_n(inst: BilevelInstance, gamma: float, delta: float, opts: BKOptions | None = None) -> BKResult:
    """Multi-start local search for the regularized bilevel problem at ``(gamma, delta)``."""
    opts = opts or BKOptions()
    low = _Lower(inst, gamma, delta, opts.solver)
    mask = inst.mask.allowed
    m1 = inst.grid1.m

    slack = 10 * opts.fd_step

    def embed(x):
        # finite-difference stencils may leave the simplex by O(fd_step);
        # anything farther (outer solver overshoot) is projected back
        if x.min() < -slack or abs(x.sum() - 1.0) > slack:
            x = _project_simplex(x, 1.0)
        w = np.zeros(m1)
        w[mask] = x + (1.0 - x.sum()) / len(x)
        return w

    f = lambda x: low.value(embed(x))  # noqa: E731
    if mask.sum() == 1:
        w = embed(np.ones(1))
        sol = low.solve(w)
        J = objective_value(inst, w, sol.plan.P)
        return BKResult(DiscreteMeasure(inst.grid1, w), sol.plan, J, 0.0, [(J, J)], low.ssn_iters, sol)
    best = None
    starts = []
    H = _curvature(inst)
    for x0 in starting_points(inst, opts.n_starts, opts.seed):
        J0 = f(x0)
        x, fx, chi = _search(f, x0, opts, H)
        starts.append((J0, fx))
        if best is None or fx < best[1]:
            best = (x, fx, chi)
    x, J, chi = best
    if chi > opts.stat_tol:
        x, J, chi = _gs_polish(f, x, J, opts, H)
    w = embed(x)
    sol = low.solve(w)
    out = BKResult(DiscreteMeasure(inst.grid1, w), sol.plan, J, chi, starts, low.ssn_iters, sol)
    if chi > opts.stat_tol:
        msg = f"best start stalled at stationarity {chi:.3e} > {opts.stat_tol:.1e}"
        if opts.strict:
            raise NoProgress(msg, out)
        log.warning(msg)
    return out


def solve_bk_exact(inst: BilevelInstance, samples: int = 2001):
    """Unregularized problem on masks of at most two cells; ``(mu1, plan, J)``.

    The objective is piecewise smooth in the single free weight, so a scan
    followed by bounded scalar refinement around the best sample suffices.
    """
    idx = np.flatnonzero(inst.mask.allowed)
    if len(idx) > 2:
        raise ValueError("exact search supports masks of at most two cells")

    def mu_of(t):
        w = np.zeros(inst.grid1.m)
        w[idx[0]] = t
        if len(idx) == 2:
            w[idx[1]] = 1.0 - t
        return DiscreteMeasure(inst.grid1, w)

    f = lambda t: exact_objective(mu_of(t), inst)[0]  # noqa: E731
    if len(idx) == 1:
        t = 1.0
    else:
        ts = np.linspace(0.0, 1.0, samples)
        vals = [f(t) for t in ts]
        i = int(np.argmin(vals))
        lo, hi = ts[max(i - 1, 0)], ts[min(i + 1, samples - 1)]
        r = minimize_scalar(f, bounds=(lo, hi), method="bounded", options={"xatol": 1e-14})
        t = float(r.x) if r.fun < vals[i] else float(ts[i])
    mu = mu_of(t)
    J, plan = exact_objective(mu, inst)
    return mu, plan, J


# ---------------------------------------------------------------------------
# recovery sequences


@dataclass(frozen=True)
class RecoveryElement:
    plan: TransportPlan
    mu1: DiscreteMeasure
    cost_tag: str
    gamma: float
    delta: float
    residual_norm: float


def recovery_sequence(mu1_star: DiscreteMeasure, inst: BilevelInstance, sched: Schedule, solver: SolverOptions | None = None) -> list[RecoveryElement]:
    """Constant first marginal, fixed cost, regularized plans along ``sched``."""
    check_same_grid(mu1_star.grid, inst.grid1)
    if abs(mu1_star.mass - 1.0) > 1e-10 or not inst.mask.admits(mu1_star):
        raise ValueError("mu1_star is not feasible")
    out = []
    for gamma, delta in sched:
        mollify_shift(mu1_star, delta)  # support check
        sol = _Lower(inst, gamma, delta, solver or SolverOptions()).solve(mu1_star.w)
        out.append(RecoveryElement(sol.plan, mu1_star, "c_d", gamma, delta, sol.residual_norm))
    return out


# ---------------------------------------------------------------------------
# convex oracle for the control problem


@dataclass
class OCPResult:
    plan: TransportPlan
    mu1: DiscreteMeasure
    J: float
    stationarity: float
    iterations: int

    def __iter__(self):
        return iter((self.plan, self.mu1, self.J))


def _project_columns(X, b):
    # each column j onto {x >= 0, sum x = b_j}
    k = X.shape[0]
    U = -np.sort(-X, axis=0)
    css = np.cumsum(U, axis=0) - b[None, :]
    ks = np.arange(1, k + 1)[:, None]
    cond = U - css / ks > 0
    r = k - 1 - np.argmax(cond[::-1], axis=0)
    theta = css[r, np.arange(X.shape[1])] / (r + 1)
    return np.maximum(X - theta[None, :], 0.0)


def solve_ocp_convex(inst: BilevelInstance, tol: float = 1e-9, max_iter: int = 500_000) -> OCPResult:
    """Global minimizer of the convex reformulation in the plan.

    Minimizes ``0.5 ||G row(pi) - y_d||^2 + nu <c_d, pi>`` over nonnegative
    plans with column marginal ``mu2_d`` whose rows lie in the mask, by
    accelerated projected gradient with adaptive restart.  ``stationarity`` is
    the norm of the gradient mapping.
    """
    if inst.objective.variant != "OCP":
        raise ValueError("solve_ocp_convex needs an OCP objective")
    rows = np.flatnonzero(inst.mask.allowed)
    if not len(rows):
        raise EmptyMask("no admissible cell")
    cols = np.flatnonzero(inst.mu2_d.w > 0)
    b = inst.mu2_d.w[cols]
    nu = inst.objective.nu
    Csub = inst.cost.c[np.ix_(rows, cols)]
    lam = np.linalg.eigvalsh(inst.poisson.matrix)[0]
    L = len(cols) / (inst.grid1.h * lam * lam)
    m1 = inst.grid1.m

    def mu_of(X):
        w = np.zeros(m1)
        w[rows] = X.sum(axis=1)
        return w

    def grad(X):
        return _ocp_fit_grad(inst, mu_of(X))[rows][:, None] + nu * Csub

    def value(X):
        return ocp_fit(inst, mu_of(X)) + nu * float((Csub * X).sum())

    X = _project_columns(np.full((len(rows), len(cols)), 1.0 / len(rows)) * b[None, :], b)
    Y, t = X.copy(), 1.0
    chi = math.inf
    it = 0
    for it in range(1, max_iter + 1):
        Xn = _project_columns(Y - grad(Y) / L, b)
        if np.sum((Y - Xn) * (Xn - X)) > 0:  # restart on oscillation
            Y, t = X.copy(), 1.0
            Xn = _project_columns(Y - grad(Y) / L, b)
        tn = 0.5 * (1 + math.sqrt(1 + 4 * t * t))
        Y = Xn + (t - 1) / tn * (Xn - X)
        X, t = Xn, tn
        if it % 50 == 0:
            chi = L * float(np.linalg.norm(X - _project_columns(X - grad(X) / L, b)))
            if chi <= tol:
                break
    chi = L * float(np.linalg.norm(X - _project_columns(X - grad(X) / L, b)))
    P = np.zeros((m1, inst.grid2.m))
    P[np.ix_(rows, cols)] = X
    plan = TransportPlan(inst.grid1, inst.grid2, P)
    mu1 = DiscreteMeasure(inst.grid1, mu_of(X))
    return OCPResult(plan, mu1, value(X), chi, it)


# ---------------------------------------------------------------------------
# convergence study


@dataclass
class StudyOptions:
    tol: float = 1e-3
    tail: int = 1  # rows judged at the end of the schedule
    bk: BKOptions = field(default_factory=BKOptions)
    threads: int | None = None  # None: read OT_BILEVEL_THREADS
    oracle: float | None = None
    limit_w1: bool = True


@dataclass
class ConvergenceRow:
    n: int
    gamma: float
    delta: float
    mu1: DiscreteMeasure | None = None
    plan: TransportPlan | None = None
    J: float = math.nan
    feas_gap: float = math.nan
    w1_drift: float = math.nan
    mass: float = math.nan
    ssn_iters: int = 0
    stationarity: float = math.nan
    limit_w1: float = math.nan
    status: str = "OK"
    error: str | None = None


@dataclass
class ConvergenceRecord:
    rows: list
    verdict: str
    hypotheses: dict
    oracle_value: float | None
    notes: list = field(default_factory=list)

    @property
    def ok_rows(self):
        return [r for r in self.rows if r.status == "OK"]


def _thread_count(opt):
    if opt is not None:
        return int(opt)
    try:
        return int(os.environ.get("OT_BILEVEL_THREADS", "0"))
    except ValueError:
        return 0


def _study_row(inst, n, gamma, delta, opts: StudyOptions) -> ConvergenceRow:
    row = ConvergenceRow(n, gamma, delta)
    try:
        res = solve_bk_n(inst, gamma, delta, opts.bk)
        mass = res.plan.mass
        row.mu1, row.plan, row.J = res.mu1, res.plan, float(res.J)
        row.mass, row.ssn_iters, row.stationarity = mass, res.ssn_iters, res.stationarity
        if abs(mass - (1 + delta)) > 1e-10 or mass > 1 + inst.rho + 1e-10:
            raise ValueError(f"plan mass {mass!r} violates the bound 1 + delta = {1 + delta!r}")
        mu1n = res.mu1.normalize()
        _, lp = solve_kp(inst.cost, mu1n, inst.mu2_d)
        row.feas_gap = res.plan.cost(inst.cost) / mass - lp
        if opts.limit_w1 and inst.cost.convex_difference:
            row.limit_w1 = plan_w1(res.plan.normalize(), monotone_plan_1d(mu1n, inst.mu2_d))
    except Exception as exc:  # recorded, the study goes on
        log.warning("row %d failed: %s", n, exc)
        row.status, row.error = "FAILED", f"{type(exc).__name__}: {exc}"
    return row


def run_convergence_study(inst: BilevelInstance, sched: Schedule, opts: StudyOptions | None = None) -> ConvergenceRecord:
    """Solve the regularized bilevel problems along ``sched`` and judge the tail."""
    opts = opts or StudyOptions()
    if sched.rho > inst.rho * (1 + 1e-12) and max(sched.deltas) > inst.rho:
        raise ValueError("schedule deltas exceed the instance rho")
    jobs = [(n, g, d) for n, (g, d) in enumerate(sched, start=1)]
    threads = _thread_count(opts.threads)
    if threads > 0:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            rows = list(ex.map(lambda j: _study_row(inst, *j, opts), jobs))
    else:
        rows = [_study_row(inst, *j, opts) for j in jobs]
    prev = None
    for row in rows:
        if row.status == "OK":
            if prev is not None:
                row.w1_drift = w1_1d(row.mu1, prev.mu1)
            prev = row
    hyp = inst.theorem_hypotheses()
    oracle = opts.oracle
    if oracle is None:
        if inst.objective.variant == "OCP":
            oracle = solve_ocp_convex(inst).J
        else:
            oracle = inst.objective.oracle_value
    verdict, notes = _verdict(rows, hyp, oracle, opts)
    return ConvergenceRecord(rows, verdict, hyp, oracle, notes)


def _verdict(rows, hyp, oracle, opts):
    tail = rows[-opts.tail :]
    if len(rows) < max(2, opts.tail):
        return "INCONCLUSIVE", ["schedule too short for a tail verdict"]
    if any(r.status != "OK" for r in tail):
        return "INCONCLUSIVE", ["failed rows in the tail"]
    if not all(abs(r.feas_gap) <= opts.tol for r in tail):
        return "INCONCLUSIVE", ["feasibility gap above tolerance in the tail"]
    notes = []
    if not all(hyp.values()):
        bad = ", ".join(k for k, v in hyp.items() if not v)
        return "FEASIBLE_LIMIT", [f"optimality not asserted, hypotheses fail: {bad}"]
    if oracle is None:
        return "FEASIBLE_LIMIT", ["no oracle value available"]
    if all(abs(r.J - oracle) <= opts.tol for r in tail):
        return "OPTIMAL_LIMIT", notes
    return "FEASIBLE_LIMIT", ["objective tail away from the oracle value"]


def coupling_ok(elem: RecoveryElement, inst: BilevelInstance, tol: float) -> bool:
    """Marginal check of a recovery element against the smoothed marginals."""
    return bool(
        check_coupling(
            elem.plan,
            mollify_shift(elem.mu1, elem.delta),
            mollify_shift(inst.mu2_d, elem.delta),
            tol,
        )
    )
