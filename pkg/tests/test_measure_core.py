import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from bilevel_ot import (
    DiscreteMeasure,
    Grid,
    GridMismatch,
    MassMismatch,
    NonCommensurateRho,
    SupportMask,
    SupportTooWide,
    extend_by_zero,
    mollify_shift,
    restrict,
    support_distance,
    w1_1d,
)
from bilevel_ot.exact_ot import CostField, solve_kp
from bilevel_ot.measure_core import convolve_cells, mollifier_weights
from conftest import random_measure, seeds


def test_grid_validation():
    g = Grid(0.0, 1.0, 4)
    assert g.h == 0.25
    assert np.allclose(g.centers, [0.125, 0.375, 0.625, 0.875])
    for bad in [(1.0, 0.0, 4), (0.0, 1.0, 0)]:
        with pytest.raises(ValueError):
            Grid(*bad)


def test_measure_rejects_negative_and_wrong_length(unit4):
    with pytest.raises(ValueError):
        DiscreteMeasure(unit4, [0.5, -0.1, 0.3, 0.3])
    with pytest.raises(ValueError):
        DiscreteMeasure(unit4, [1.0, 0.0])


def test_measure_json_roundtrip(unit4):
    mu = DiscreteMeasure(unit4, [0.1, 0.2, 0.3, 0.4])
    back = DiscreteMeasure.from_json(mu.to_json())
    assert back.grid.same_as(unit4)
    assert np.array_equal(back.w, mu.w)


def test_support_distance_examples():
    g = Grid(0.0, 1.0, 5)
    assert support_distance(DiscreteMeasure.dirac(g, 0.5)) == pytest.approx(0.5)
    g3 = Grid(0.0, 1.0, 3)
    assert support_distance(DiscreteMeasure(g3, [0.0, 1.0, 0.0])) == pytest.approx(0.5)
    g4 = Grid(0.0, 1.0, 4)
    assert support_distance(DiscreteMeasure.uniform(g4)) == pytest.approx(0.125)
    assert support_distance(DiscreteMeasure(g4, np.zeros(4))) == math.inf


def test_support_ignores_floating_dust(unit4):
    mu = DiscreteMeasure(unit4, [1e-17, 0.5, 0.5, 0.0])
    assert support_distance(mu) == pytest.approx(0.375)


def test_support_mask_center_rule():
    g = Grid(0.0, 1.0, 8)
    mask = SupportMask.from_rho(g, 0.25)
    assert mask.allowed.tolist() == [False, False, True, True, True, True, False, False]
    assert mask.count == 4


def test_extend_by_zero_examples(unit4):
    mu = DiscreteMeasure(unit4, [0.1, 0.2, 0.3, 0.4])
    ext = extend_by_zero(mu, 0.25)
    assert (ext.grid.a, ext.grid.b, ext.grid.m) == pytest.approx((-0.25, 1.25, 6))
    assert ext.w.tolist() == [0.0, 0.1, 0.2, 0.3, 0.4, 0.0]
    assert ext.mass == mu.mass
    assert support_distance(ext) >= 0.25
    same = extend_by_zero(mu, 0.0)
    assert same.grid.same_as(unit4) and np.array_equal(same.w, mu.w)
    back = restrict(ext, unit4)
    assert np.array_equal(back.w, mu.w)


def test_extend_requires_commensurate_rho(unit4):
    mu = DiscreteMeasure.uniform(unit4)
    with pytest.raises(NonCommensurateRho):
        extend_by_zero(mu, 0.1)


def test_restrict_examples(unit4):
    big = DiscreteMeasure.uniform(Grid(-0.25, 1.25, 6))
    part = restrict(big, unit4)
    assert part.mass == pytest.approx(4 / 6, abs=1e-15)
    assert np.array_equal(restrict(big, big.grid).w, big.w)
    with pytest.raises(GridMismatch):
        restrict(big, Grid(0.1, 1.1, 4))


def test_mollify_shift_dirac_against_direct_kernel_sum():
    g = Grid(0.0, 1.0, 50)
    mu = DiscreteMeasure.dirac(g, 0.5)
    delta = 0.1
    out = mollify_shift(mu, delta)
    shift = delta * g.h / g.length
    conv = out.w - shift
    centers = g.centers
    assert np.all(conv[(centers < 0.4) | (centers > 0.6)] <= 1e-15)
    # direct summation of the bump at the cell centers around the atom
    x0 = centers[np.argmax(mu.w)]
    t = (centers - x0) / delta
    k = np.where(np.abs(t) < 1, np.exp(-1.0 / np.maximum(1 - t**2, 1e-300)), 0.0)
    k /= k.sum()
    assert np.allclose(conv, k, atol=1e-15)
    assert out.mass == pytest.approx(1 + delta, abs=1e-14)


def test_mollify_shift_requires_support_distance():
    g = Grid(0.0, 1.0, 10)
    with pytest.raises(SupportTooWide):
        mollify_shift(DiscreteMeasure.uniform(g), 0.2)


def test_discrete_kernel_sums_to_one():
    for h, delta in [(0.01, 0.1), (0.25, 0.1), (1 / 32, 0.3)]:
        _, k = mollifier_weights(h, delta)
        assert k.sum() == pytest.approx(1.0, abs=1e-15)
        assert np.allclose(k, k[::-1])


def test_kernel_below_cell_width_is_identity():
    w = np.array([0.0, 0.3, 0.7, 0.0])
    assert np.allclose(convolve_cells(w, 0.25, 0.1), w)


def test_w1_examples():
    g = Grid(0.0, 1.0, 4)
    a = DiscreteMeasure.dirac(g, 0.125)
    b = DiscreteMeasure.dirac(g, 0.625)
    assert w1_1d(a, b) == pytest.approx(0.5, abs=1e-15)
    assert w1_1d(a, a) == 0.0
    g2 = Grid(0.0, 1.0, 10)
    left = DiscreteMeasure(g2, [0.2] * 5 + [0.0] * 5)
    right = DiscreteMeasure(g2, [0.0] * 5 + [0.2] * 5)
    assert w1_1d(left, right) == pytest.approx(0.5, abs=1e-14)
    with pytest.raises(MassMismatch):
        w1_1d(a, DiscreteMeasure(g, [0.5, 0, 0, 0]))


@given(seeds(), st.integers(2, 12))
def test_w1_equals_lp_with_absolute_cost(seed, m):
    rng = np.random.default_rng(seed)
    g = Grid(0.0, 1.0, m)
    mu, nu = random_measure(rng, g, zeros=True), random_measure(rng, g, zeros=True)
    _, value = solve_kp(CostField.power(g, g, 1.0), mu, nu)
    assert w1_1d(mu, nu) == pytest.approx(value, abs=1e-9)


@given(seeds(), st.integers(1, 15))
def test_w1_metric_axioms(seed, m):
    rng = np.random.default_rng(seed)
    g = Grid(-1.0, 2.0, m)
    a, b, c = (random_measure(rng, g, zeros=True) for _ in range(3))
    assert w1_1d(a, b) == w1_1d(b, a)
    assert w1_1d(a, c) <= w1_1d(a, b) + w1_1d(b, c) + 1e-10
    assert w1_1d(a, a) == 0.0


@given(seeds(), st.integers(10, 40), st.floats(0.05, 1.0))
def test_mollify_shift_mass_identity_and_floor(seed, m, frac):
    rng = np.random.default_rng(seed)
    g = Grid(0.0, 1.0, m)
    rho = 0.3
    mask = SupportMask.from_rho(g, rho)
    w = rng.random(m) * mask.allowed
    mu = DiscreteMeasure(g, w * (rng.uniform(0.5, 2) / w.sum()))
    delta = frac * rho
    out = mollify_shift(mu, delta)
    assert abs(out.mass - mu.mass - delta) <= 1e-12
    assert out.w.min() >= delta * g.h / g.length * (1 - 1e-12)
    conv = DiscreteMeasure(g, np.maximum(out.w - delta * g.h / g.length, 0.0))
    assert support_distance(conv) >= rho - delta - 1e-12


@given(seeds(), st.integers(1, 10), st.integers(0, 3))
def test_extend_restrict_inverse(seed, m, k):
    rng = np.random.default_rng(seed)
    g = Grid(0.0, 2.0, m)
    mu = random_measure(rng, g, zeros=True)
    ext = extend_by_zero(mu, k * g.h)
    assert ext.mass == mu.mass
    assert np.all(ext.w >= 0)
    assert np.array_equal(restrict(ext, g).w, mu.w)


def test_mollified_convergence_is_linear_in_delta():
    g = Grid(0.0, 1.0, 400)
    x = g.centers
    w = np.exp(-((x - 0.45) ** 2) / 0.01) * (np.abs(x - 0.5) <= 0.25)
    mu = DiscreteMeasure(g, w / w.sum())
    deltas = [0.2, 0.1, 0.05, 0.025]
    d = [w1_1d(mollify_shift(mu, t).normalize(), mu) for t in deltas]
    assert all(b < a for a, b in zip(d, d[1:]))
    ratios = [di / t for di, t in zip(d, deltas)]
    assert max(ratios) <= 2 * min(ratios)
