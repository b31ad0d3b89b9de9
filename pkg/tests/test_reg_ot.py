import warnings

import numpy as np
import pytest
from hypothesis import given, strategies as st

from bilevel_ot import (
    CostField,
    DiscreteMeasure,
    DualPotentials,
    Grid,
    MassMismatch,
    SolverOptions,
    TransportPlan,
    check_coupling,
    mollify_shift,
    primal_from_dual,
    reg_objective,
    reg_residual,
    solve_kp,
    solve_reg,
)
from bilevel_ot.reg_ot import l2_norm_sq, pg_solve
from conftest import random_measure, random_weights, seeds


def single():
    g = Grid(0.0, 1.0, 1)
    return g, CostField(g, g, np.array([[2.0]]))


def test_reg_objective_examples():
    g, c = single()
    assert reg_objective(TransportPlan(g, g, np.zeros((1, 1))), c, 1.0) == 0.0
    assert reg_objective(TransportPlan(g, g, np.ones((1, 1))), c, 2.0) == pytest.approx(3.0)


def test_reg_objective_converges_under_refinement():
    # product plan of uniform densities on [0,1]^2 with c=|x-y|^2: <c,pi> = 1/6, |pi|^2 = 1
    vals = []
    for m in (8, 16, 32, 64):
        g = Grid(0.0, 1.0, m)
        P = np.full((m, m), 1.0 / m**2)
        vals.append(reg_objective(TransportPlan(g, g, P), CostField.power(g, g, 2), 0.5))
    err = [abs(v - (1 / 6 + 0.25)) for v in vals]
    assert all(e <= g_h for e, g_h in zip(err, [1 / 8, 1 / 16, 1 / 32, 1 / 64]))
    assert err[-1] < err[0]


def test_primal_from_dual_examples():
    g = Grid(0.0, 1.0, 3)
    c = CostField.power(g, g, 2)
    zero = primal_from_dual(DualPotentials(np.zeros(3), np.zeros(3)), c, 1.0)
    assert np.all(zero.P == 0)
    g1 = Grid(0.0, 1.0, 1)
    P = primal_from_dual(DualPotentials([1.0], [1.0]), CostField(g1, g1, np.array([[1.0]])), 1.0)
    assert P.P[0, 0] == pytest.approx(1.0)


def test_reg_residual_examples():
    g = Grid(0.0, 1.0, 3)
    c = CostField.power(g, g, 2)
    r1, r2 = DiscreteMeasure(g, [0.2, 0.3, 0.5]), DiscreteMeasure.uniform(g)
    res = reg_residual(DualPotentials(np.zeros(3), np.zeros(3)), c, r1, r2, 0.1)
    assert np.allclose(res, -np.concatenate([r1.w, r2.w]))
    # constant cost, uniform marginals: alpha1 + alpha2 - c0 = gamma * density
    c0, gamma = 0.7, 0.3
    cc = CostField(g, g, np.full((3, 3), c0))
    dens = (1 / 9) / (g.h * g.h)
    pot = DualPotentials(np.full(3, c0 + gamma * dens), np.zeros(3))
    assert np.abs(reg_residual(pot, cc, r2, r2, gamma)).max() <= 1e-15


def test_solve_reg_examples():
    g = Grid(0.0, 1.0, 5)
    u = DiscreteMeasure.uniform(g)
    sol = solve_reg(CostField(g, g, np.full((5, 5), 0.3)), u, u, 0.01)
    assert np.allclose(sol.plan.P, 1 / 25, atol=1e-12)
    g1, c = single()
    mu = DiscreteMeasure(g1, [1.7])
    assert solve_reg(c, mu, mu, 0.5).plan.P[0, 0] == pytest.approx(1.7, abs=1e-10)
    with pytest.raises(MassMismatch):
        solve_reg(CostField.power(g, g, 2), u, DiscreteMeasure.uniform(g, 2.0), 0.1)


@given(seeds(), st.integers(2, 7), st.integers(2, 7), st.sampled_from([1e-3, 1e-2, 1e-1, 1.0]))
def test_ssn_matches_pg_oracle(seed, m1, m2, gamma):
    rng = np.random.default_rng(seed)
    g1, g2 = Grid(0.0, 1.0, m1), Grid(0.0, 2.0, m2)
    c = CostField(g1, g2, rng.random((m1, m2)))
    mu1, mu2 = random_measure(rng, g1), random_measure(rng, g2)
    sol = solve_reg(c, mu1, mu2, gamma)
    assert sol.residual_norm <= 1e-10
    s = g1.h * g2.h / gamma
    P, _, ok = pg_solve(c.c, mu1.w, mu2.w, s, tol=1e-12)
    assert ok
    assert np.abs(sol.plan.P - P).max() <= 1e-8


@given(seeds(), st.integers(2, 6))
def test_primal_dual_consistency_and_kkt(seed, m):
    rng = np.random.default_rng(seed)
    g = Grid(0.0, 1.0, m)
    c = CostField.power(g, g, 2)
    mu1, mu2 = random_measure(rng, g), random_measure(rng, g)
    gamma = 10 ** rng.uniform(-4, 0)
    sol = solve_reg(c, mu1, mu2, gamma)
    again = primal_from_dual(sol.potentials, c, gamma)
    assert np.array_equal(again.P, sol.plan.P)
    assert np.abs(reg_residual(sol.potentials, c, mu1, mu2, gamma)).max() <= 1e-10
    assert check_coupling(sol.plan, mu1, mu2, 1e-10)


@given(seeds())
def test_solution_minimizes_objective_over_polytope(seed):
    rng = np.random.default_rng(seed)
    g = Grid(0.0, 1.0, 4)
    c = CostField(g, g, rng.random((4, 4)))
    mu1, mu2 = random_measure(rng, g), random_measure(rng, g)
    gamma = 0.05
    sol = solve_reg(c, mu1, mu2, gamma)
    best = reg_objective(sol.plan, c, gamma)
    # feasible perturbations along 2x2 cycles
    for _ in range(20):
        i, k = rng.choice(4, 2, replace=False)
        j, l = rng.choice(4, 2, replace=False)
        D = np.zeros((4, 4))
        D[i, j] = D[k, l] = 1
        D[i, l] = D[k, j] = -1
        t = 1e-3 * rng.choice([-1, 1])
        Q = sol.plan.P + t * D
        if Q.min() >= 0:
            assert reg_objective(TransportPlan(g, g, Q), c, gamma) >= best - 1e-15


def test_gauge_invariance_of_warm_start():
    rng = np.random.default_rng(7)
    g = Grid(0.0, 1.0, 6)
    c = CostField.power(g, g, 2)
    mu1, mu2 = random_measure(rng, g), random_measure(rng, g)
    base = solve_reg(c, mu1, mu2, 0.01)
    a1, a2 = base.potentials.alpha1, base.potentials.alpha2
    noise = 0.01 * rng.standard_normal(6)
    for t in (-3.0, 0.5, 10.0):
        init = DualPotentials(a1 + t + noise, a2 - t + noise)
        other = solve_reg(c, mu1, mu2, 0.01, init=init)
        assert np.abs(other.plan.P - base.plan.P).max() <= 1e-12


def test_zero_marginal_cells_take_pg_path():
    g = Grid(0.0, 1.0, 4)
    c = CostField.power(g, g, 2)
    mu1 = DiscreteMeasure(g, [0.0, 0.5, 0.5, 0.0])
    mu2 = DiscreteMeasure(g, [0.25, 0.25, 0.25, 0.25])
    sol = solve_reg(c, mu1, mu2, 0.1)
    assert sol.method == "PG"
    assert check_coupling(sol.plan, mu1, mu2, 1e-10)
    assert np.all(sol.plan.P[[0, 3], :] == 0)


def test_pg_method_option_agrees_with_ssn():
    rng = np.random.default_rng(2)
    g = Grid(0.0, 1.0, 5)
    c = CostField.power(g, g, 2)
    mu1, mu2 = random_measure(rng, g), random_measure(rng, g)
    a = solve_reg(c, mu1, mu2, 0.02)
    b = solve_reg(c, mu1, mu2, 0.02, SolverOptions(method="pg"))
    assert a.method == "SSN" and b.method == "PG"
    assert np.abs(a.plan.P - b.plan.P).max() <= 1e-9


def smoothed_pair(m=32):
    g = Grid(0.0, 1.0, m)
    x = g.centers
    inner = np.abs(x - 0.5) <= 0.25
    w1 = np.exp(-((x - 0.4) ** 2) / 0.01) * inner
    w2 = (1.1 + np.cos(6 * x)) * inner
    mu1 = mollify_shift(DiscreteMeasure(g, w1 / w1.sum()), 0.2)
    mu2 = mollify_shift(DiscreteMeasure(g, w2 / w2.sum()), 0.2)
    return g, CostField.power(g, g, 2), mu1, mu2


def test_transport_cost_decreases_with_gamma_and_gap_bounded():
    g, c, mu1, mu2 = smoothed_pair()
    lp_plan, lp = solve_kp(c, mu1, mu2)
    prev = np.inf
    nnz = []
    for gamma in [1e-1, 1e-2, 1e-3, 1e-4, 1e-5]:
        sol = solve_reg(c, mu1, mu2, gamma)
        cost = sol.plan.cost(c)
        gap = cost - lp
        assert gap >= -1e-12
        # the comparison plan must be an optimal one for this bound to hold in general
        assert gap <= 0.5 * gamma * l2_norm_sq(lp_plan) + 1e-12
        assert cost <= prev + 1e-9
        prev = cost
        nnz.append(sol.plan.nnz)
    if any(b > a for a, b in zip(nnz, nnz[1:])):
        warnings.warn(f"plan support grew as gamma decreased: {nnz}")  # empirical trend only
