import numpy as np
import pytest
from hypothesis import given, strategies as st

from bilevel_ot import (
    DiscreteMeasure,
    Grid,
    MarginalMismatch,
    SupportTooWide,
    TransportPlan,
    check_coupling,
    glue,
    glue_and_project,
    mollified_plan,
    mollify_shift,
    monotone_plan_1d,
    plan_w1,
    transfer_plan,
    w1_1d,
)
from bilevel_ot.gluing import kernel_l2_sq, mollified_plan_l2_bound
from bilevel_ot.reg_ot import l2_norm_sq
from conftest import random_measure, random_weights, seeds


def random_plan(rng, g1, g2, zeros=False):
    P = rng.random((g1.m, g2.m))
    if zeros:
        P[rng.random(P.shape) < 0.4] = 0.0
        P[0, 0] += 0.1
    return TransportPlan(g1, g2, P / P.sum())


def test_identity_theta_returns_pi():
    rng = np.random.default_rng(0)
    g1, g2 = Grid(0.0, 1.0, 5), Grid(0.0, 1.0, 4)
    pi = random_plan(rng, g1, g2)
    mu1 = pi.row_marginal()
    theta = TransportPlan(g1, g1, np.diag(mu1.w))
    assert np.allclose(glue_and_project(theta, pi, mu1).P, pi.P, atol=1e-15)


def test_dirac_mid_gives_product():
    g1, g2 = Grid(0.0, 1.0, 4), Grid(0.0, 1.0, 3)
    rng = np.random.default_rng(1)
    mid = DiscreteMeasure(g1, [0.0, 1.0, 0.0, 0.0])
    a, b = random_weights(rng, 4), random_weights(rng, 3)
    theta = np.zeros((4, 4))
    theta[:, 1] = a
    pi = np.zeros((4, 3))
    pi[1, :] = b
    out = glue_and_project(TransportPlan(g1, g1, theta), TransportPlan(g1, g2, pi), mid)
    assert np.allclose(out.P, np.outer(a, b), atol=1e-15)


def test_marginal_precondition():
    rng = np.random.default_rng(2)
    g = Grid(0.0, 1.0, 3)
    pi = random_plan(rng, g, g)
    with pytest.raises(MarginalMismatch):
        glue_and_project(pi, pi, DiscreteMeasure.uniform(g))


def test_glue_projections():
    rng = np.random.default_rng(3)
    g1, g2 = Grid(0.0, 1.0, 4), Grid(0.0, 1.0, 5)
    mu, mid = random_measure(rng, g1), random_measure(rng, g1, zeros=True)
    pi = monotone_plan_1d(mid, random_measure(rng, g2))
    theta = monotone_plan_1d(mu, mid)
    S = glue(theta, pi, mid)
    assert np.allclose(S.p12(), theta.P, atol=1e-15)
    assert np.allclose(S.p23(), pi.P, atol=1e-15)
    assert np.allclose(S.p13(), glue_and_project(theta, pi, mid).P, atol=1e-15)


@given(seeds(), st.integers(1, 12), st.integers(1, 12))
def test_glue_and_project_marginals(seed, m1, m2):
    rng = np.random.default_rng(seed)
    g1, g2 = Grid(0.0, 1.0, m1), Grid(0.0, 1.0, m2)
    mid = random_measure(rng, g1, zeros=True)
    theta = monotone_plan_1d(random_measure(rng, g1, zeros=True), mid)
    pi = monotone_plan_1d(mid, random_measure(rng, g2, zeros=True))
    out = glue_and_project(theta, pi, mid)
    assert check_coupling(out, theta.row_marginal(), pi.col_marginal(), 1e-12)
    assert abs(out.mass - pi.mass) <= 1e-12


def test_transfer_examples():
    rng = np.random.default_rng(5)
    g1, g2 = Grid(0.0, 1.0, 6), Grid(0.0, 1.0, 4)
    mu1 = random_measure(rng, g1)
    pi = monotone_plan_1d(mu1, random_measure(rng, g2))
    assert np.allclose(transfer_plan(mu1, mu1, pi).P, pi.P, atol=1e-15)
    a, b = DiscreteMeasure.dirac(g1, 0.1), DiscreteMeasure.dirac(g1, 0.8)
    nu = random_measure(rng, g2)
    pd = TransportPlan(g1, g2, np.outer(a.w, nu.w))
    moved = transfer_plan(b, a, pd)
    assert np.allclose(moved.P, np.roll(pd.P, np.argmax(b.w) - np.argmax(a.w), axis=0), atol=1e-15)


@given(seeds(), st.integers(1, 12), st.integers(1, 12))
def test_transfer_contraction(seed, m1, m2):
    rng = np.random.default_rng(seed)
    g1, g2 = Grid(0.0, 1.0, m1), Grid(0.0, 1.0, m2)
    pi = random_plan(rng, g1, g2, zeros=True)
    mu1 = pi.row_marginal()
    mu1_n = random_measure(rng, g1, zeros=True)
    out = transfer_plan(mu1_n, mu1, pi)
    assert np.all(out.P >= 0)
    assert check_coupling(out, mu1_n, pi.col_marginal(), 1e-12)
    assert plan_w1(out, pi) <= w1_1d(mu1_n, mu1) + 1e-10


def test_mollified_plan_marginals_and_mass():
    rng = np.random.default_rng(6)
    g1, g2 = Grid(0.0, 1.0, 20), Grid(0.0, 2.0, 24)
    P = np.zeros((20, 24))
    P[6:14, 8:16] = rng.random((8, 8))
    pi = TransportPlan(g1, g2, P / P.sum())
    delta = 0.2
    th = mollified_plan(pi, delta)
    assert abs(th.mass - pi.mass - delta) <= 1e-12
    assert th.P.min() > 0
    assert np.abs(th.P.sum(axis=1) - mollify_shift(pi.row_marginal(), delta).w).max() <= 1e-12
    assert np.abs(th.P.sum(axis=0) - mollify_shift(pi.col_marginal(), delta).w).max() <= 1e-12
    assert l2_norm_sq(th) <= mollified_plan_l2_bound(pi, delta)
    with pytest.raises(SupportTooWide):
        mollified_plan(pi, 0.4)


def test_mollified_product_is_separable():
    rng = np.random.default_rng(7)
    g = Grid(0.0, 1.0, 16)
    inner = np.zeros(16)
    inner[5:11] = 1
    a = DiscreteMeasure(g, random_weights(rng, 16) * inner / 0.5)
    a = a.normalize()
    b = DiscreteMeasure(g, inner / inner.sum())
    delta = 0.15
    th = mollified_plan(TransportPlan(g, g, np.outer(a.w, b.w)), delta)
    shift = delta * g.h * g.h
    ma = mollify_shift(a, delta).w - delta * g.h
    mb = mollify_shift(b, delta).w - delta * g.h
    assert np.allclose(th.P - shift, np.outer(ma, mb), atol=1e-15)


def test_kernel_norm_scales_like_inverse_delta_squared():
    h, rho = 1 / 256, 0.25
    deltas = np.geomspace(4 * h, rho, 6)
    C = [kernel_l2_sq(h, d) ** 2 * d**2 for d in deltas]
    assert max(C) / min(C) <= 2.0
