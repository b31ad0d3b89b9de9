"""Couplings built for the convergence analysis.

``transfer_plan`` moves a plan with first marginal ``mu1`` onto a nearby
first marginal ``mu1_n`` by gluing it with a W1-optimal coupling of the two
first marginals; ``mollified_plan`` smooths a plan in both coordinates so
that its marginals are exactly the mollified-and-shifted marginals.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import MarginalMismatch, SupportTooWide
from .exact_ot import TransportPlan, monotone_plan_1d
from .measure_core import (
    DiscreteMeasure,
    Grid,
    _check_masses,
    _frozen,
    check_same_grid,
    convolve_cells,
    mollifier_weights,
    support_distance,
)

GLUE_TOL = 1e-12


def _check_marginal(got, want, what):
    scale = max(1.0, float(np.abs(want).sum()))
    err = float(np.abs(got - want).max()) if len(want) else 0.0
    if err > 1e-10 * scale:
        raise MarginalMismatch(f"{what} deviates by {err:.3e}")


@dataclass(frozen=True)
class TriCoupling:
    """Measure on ``g1 x g1 x g2`` with prescribed (1,2) and (2,3) projections."""

    g1: Grid
    g2: Grid
    S: np.ndarray = field(repr=False)

    def __post_init__(self):
        S = _frozen(self.S)
        if S.shape != (self.g1.m, self.g1.m, self.g2.m) or np.any(S < 0):
            raise ValueError("S must be a nonnegative m1 x m1 x m2 array")
        object.__setattr__(self, "S", S)

    def p12(self) -> np.ndarray:
        return self.S.sum(axis=2)

    def p23(self) -> np.ndarray:
        return self.S.sum(axis=0)

    def p13(self) -> np.ndarray:
        return self.S.sum(axis=1)


def _inverse_mass(mid):
    # cells without mass carry nothing: theta's column and pi's row vanish there
    inv = np.zeros_like(mid)
    pos = mid > 0
    inv[pos] = 1.0 / mid[pos]
    return inv


def glue(theta: TransportPlan, pi: TransportPlan, mid: DiscreteMeasure) -> TriCoupling:
    """Materialize ``S(i,k,j) = theta(i,k) pi(k,j) / mid(k)`` (test-size instances only)."""
    _check_glue_inputs(theta, pi, mid)
    inv = _inverse_mass(mid.w)
    S = theta.P[:, :, None] * (inv[:, None] * pi.P)[None, :, :]
    return TriCoupling(theta.grid1, pi.grid2, S)


def _check_glue_inputs(theta, pi, mid):
    check_same_grid(theta.grid2, mid.grid)
    check_same_grid(pi.grid1, mid.grid)
    _check_marginal(theta.P.sum(axis=0), mid.w, "column marginal of theta")
    _check_marginal(pi.P.sum(axis=1), mid.w, "row marginal of pi")


def glue_and_project(theta: TransportPlan, pi: TransportPlan, mid: DiscreteMeasure) -> TransportPlan:
    """(1,3)-projection of the glued measure, computed without forming it."""
    _check_glue_inputs(theta, pi, mid)
    inv = _inverse_mass(mid.w)
    return TransportPlan(theta.grid1, pi.grid2, (theta.P * inv[None, :]) @ pi.P)


def transfer_plan(mu1_n: DiscreteMeasure, mu1: DiscreteMeasure, pi: TransportPlan) -> TransportPlan:
    """Coupling of ``mu1_n`` with the second marginal of ``pi`` that stays W1-close to ``pi``."""
    check_same_grid(mu1_n.grid, mu1.grid)
    _check_masses(mu1_n.mass, mu1.mass)
    _check_marginal(pi.P.sum(axis=1), mu1.w, "row marginal of pi")
    theta = monotone_plan_1d(mu1_n, mu1)
    return glue_and_project(theta, pi, mu1)


def kernel_l2_sq(h: float, delta: float) -> float:
    """Squared L2 norm of the discrete 1-D mollifier viewed as a density."""
    _, k = mollifier_weights(h, delta)
    return float((k**2).sum() / h)


def mollified_plan(pi: TransportPlan, delta: float) -> TransportPlan:
    """``(phi_delta x phi_delta) * pi + delta / (|Omega1| |Omega2|)`` as cell masses."""
    tol = 1e-12
    d1 = support_distance(pi.row_marginal())
    d2 = support_distance(pi.col_marginal())
    if d1 < delta - tol * pi.grid1.length or d2 < delta - tol * pi.grid2.length:
        raise SupportTooWide(f"plan support at distance ({d1}, {d2}) < delta={delta}")
    g1, g2 = pi.grid1, pi.grid2
    Q = np.apply_along_axis(convolve_cells, 0, pi.P, g1.h, delta)
    Q = np.apply_along_axis(convolve_cells, 1, Q, g2.h, delta)
    shift = delta * g1.h * g2.h / (g1.length * g2.length)
    return TransportPlan(g1, g2, Q + shift)


def mollified_plan_l2_bound(pi: TransportPlan, delta: float) -> float:
    """Right side of ``|theta|^2 <= 2 |phi x phi|^2 mass(pi)^2 + 2 |shift|^2``."""
    g1, g2 = pi.grid1, pi.grid2
    kern = kernel_l2_sq(g1.h, delta) * kernel_l2_sq(g2.h, delta)
    shift_sq = delta**2 / (g1.length * g2.length)
    return 2.0 * kern * pi.mass**2 + 2.0 * shift_sq
