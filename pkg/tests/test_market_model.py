from decimal import Decimal, getcontext

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from flexmerge.errors import InvalidInput, SingularMarkupSystem
from flexmerge.market_model import (
    ConductSpec,
    DemandSpec,
    MarketData,
    conduct_markup,
    logit_derivatives,
    logit_shares,
    marginal_cost,
    outside_diversion,
)

finite = st.floats(-30, 30, allow_nan=False)
deltas = st.integers(1, 5).flatmap(lambda J: arrays(float, J, elements=finite))


def simplex_shares(draw_sizes=st.integers(1, 5)):
    return draw_sizes.flatmap(
        lambda J: arrays(float, J + 1, elements=st.floats(0.01, 1.0)).map(lambda v: (v / v.sum())[:J])
    )


def test_shares_symmetric_duopoly():
    np.testing.assert_allclose(logit_shares([0.0, 0.0]), [1 / 3, 1 / 3], rtol=1e-15)


def test_shares_single_product():
    assert logit_shares([0.0])[0] == 0.5


def test_shares_high_precision_oracle():
    getcontext().prec = 50
    d = [Decimal(1), Decimal(2), Decimal(3)]
    den = Decimal(1) + sum(v.exp() for v in d)
    ref = [float(v.exp() / den) for v in d]
    np.testing.assert_allclose(logit_shares([1.0, 2.0, 3.0]), ref, rtol=1e-14)


def test_shares_large_utilities_stay_finite():
    s = logit_shares([700.0, 699.0, -700.0])
    assert np.all(np.isfinite(s)) and s.sum() <= 1.0
    assert s[0] > s[1] > 0


def test_shares_reject_non_finite():
    with pytest.raises(InvalidInput):
        logit_shares([0.0, np.nan])


@given(deltas)
def test_shares_in_open_simplex(delta):
    s = logit_shares(delta)
    assert np.all(s > 0) and np.all(s < 1)
    assert s.sum() < 1


def test_derivatives_single():
    np.testing.assert_allclose(logit_derivatives([0.5], -0.25), [[-0.0625]], rtol=1e-15)


def test_derivatives_duopoly():
    np.testing.assert_allclose(logit_derivatives([0.3, 0.3], -1.0), [[-0.21, 0.09], [0.09, -0.21]], rtol=1e-14)


def test_derivatives_reject_bad_shares():
    with pytest.raises(InvalidInput):
        logit_derivatives([0.6, 0.5], -1.0)
    with pytest.raises(InvalidInput):
        logit_derivatives([0.0, 0.5], -1.0)


@given(st.integers(1, 4), st.integers(0, 2**31 - 1))
def test_derivatives_match_finite_differences(J, seed):
    rng = np.random.default_rng(seed)
    alpha = -rng.uniform(0.1, 2.0)
    delta0 = rng.normal(size=J)
    p = rng.uniform(0.5, 3.0, size=J)
    s = logit_shares(delta0 + alpha * p)
    D = logit_derivatives(s, alpha)
    h = 1e-5
    num = np.empty((J, J))
    for k in range(J):
        e = np.zeros(J)
        e[k] = h
        num[:, k] = (logit_shares(delta0 + alpha * (p + e)) - logit_shares(delta0 + alpha * (p - e))) / (2 * h)
    np.testing.assert_allclose(D, num, rtol=1e-6, atol=1e-12)


@given(simplex_shares(), st.floats(-5, -0.01))
def test_derivative_row_sums(s, alpha):
    D = logit_derivatives(s, alpha)
    s0 = 1 - s.sum()
    np.testing.assert_allclose(D.sum(axis=1), alpha * s * s0, rtol=1e-9, atol=1e-15)
    assert np.all(np.diag(D) < 0)


def test_single_product_bertrand_markup():
    s = np.array([0.2])
    m = conduct_markup(s, logit_derivatives(s, -0.25), np.eye(1))
    # -1 / (alpha (1 - s)) = 1 / (0.25 * 0.8)
    assert m[0] == pytest.approx(5.0, rel=1e-14)


@given(st.floats(1e-4, 0.999), st.floats(-5, -0.01))
def test_single_product_markup_closed_form(s, alpha):
    m = conduct_markup([s], logit_derivatives([s], alpha), np.eye(1))
    assert m[0] == pytest.approx(-1.0 / (alpha * (1 - s)), rel=1e-12)


def test_perfect_competition_zero_markup():
    s = np.array([0.2, 0.3])
    m = conduct_markup(s, logit_derivatives(s, -0.25), np.eye(2), ConductSpec.perfect_competition())
    assert np.all(m == 0)


def test_monopoly_markup_matches_grid_search():
    alpha, delta0, c = -1.0, np.array([1.0, 0.5]), np.array([1.0, 1.5])

    def profit(p1, p2):
        u = delta0[None, None, :] + alpha * np.stack(np.broadcast_arrays(p1, p2), axis=-1)
        e = np.exp(u)
        s = e / (1 + e.sum(axis=-1, keepdims=True))
        return ((np.stack(np.broadcast_arrays(p1, p2), axis=-1) - c) * s).sum(axis=-1)

    lo, hi = np.array([1.0, 1.0]), np.array([6.0, 6.0])
    for _ in range(12):
        g1 = np.linspace(lo[0], hi[0], 41)
        g2 = np.linspace(lo[1], hi[1], 41)
        P = profit(g1[:, None], g2[None, :])
        i, j = np.unravel_index(np.argmax(P), P.shape)
        best = np.array([g1[i], g2[j]])
        half = (hi - lo) / 8
        lo, hi = best - half, best + half
    s = logit_shares(delta0 + alpha * best)
    m = conduct_markup(s, logit_derivatives(s, alpha), np.ones((2, 2)))
    np.testing.assert_allclose(best - c, m, atol=1e-4)


@given(simplex_shares(st.integers(1, 4)), st.floats(-3, -0.05), st.floats(0.1, 10.0))
def test_markup_invariant_to_uniform_scaling(s, alpha, k):
    J = s.size
    H = np.full((J, J), 0.4) + 0.6 * np.eye(J)
    D = logit_derivatives(s, alpha)
    np.testing.assert_allclose(conduct_markup(s, D, k * H), conduct_markup(s, D, H) / k, rtol=1e-9)
    # degree zero in (H, s) jointly is the homogeneity we rely on
    np.testing.assert_allclose(conduct_markup(k * s, D, k * H), conduct_markup(s, D, H), rtol=1e-9)


def test_singular_markup_reports_market():
    s = np.array([0.2, 0.3])
    with pytest.raises(SingularMarkupSystem) as exc:
        conduct_markup(s, np.zeros((2, 2)), np.eye(2), market_id=17)
    assert exc.value.market_id == 17


def test_marginal_cost_examples():
    np.testing.assert_array_equal(marginal_cost(np.eye(3), [3, 6, 4], np.zeros(3)), [3, 6, 4])
    assert marginal_cost(np.ones((1, 3)), [3, 6, 4], np.zeros(1))[0] == 13


def test_marginal_cost_loop_oracle(rng):
    w = rng.normal(size=(7, 3))
    g = rng.normal(size=3)
    om = rng.normal(size=7)
    ref = [sum(w[j, k] * g[k] for k in range(3)) + om[j] for j in range(7)]
    np.testing.assert_allclose(marginal_cost(w, g, om), ref, rtol=1e-14)


def test_marginal_cost_dimension_mismatch():
    with pytest.raises(InvalidInput):
        marginal_cost(np.ones((2, 3)), [1.0, 2.0])
    with pytest.raises(InvalidInput):
        marginal_cost(np.ones((2, 3)), [1.0, 2.0, 3.0], np.zeros(3))


def test_conduct_ownership_rules():
    owners = np.array([0, 1, 2])
    np.testing.assert_array_equal(ConductSpec.bertrand().ownership(owners), np.eye(3))
    np.testing.assert_array_equal(ConductSpec.monopoly().ownership(owners), np.ones((3, 3)))
    H = ConductSpec.profit_weight(0.75).ownership(owners)
    np.testing.assert_array_equal(H, np.full((3, 3), 0.75) + 0.25 * np.eye(3))


def test_conduct_kappa_rules():
    with pytest.raises(InvalidInput):
        ConductSpec("ProfitWeight")
    with pytest.raises(InvalidInput):
        ConductSpec("Bertrand", 0.5)
    with pytest.raises(InvalidInput):
        ConductSpec.profit_weight(1.5)
    c = ConductSpec.profit_weight(0.75)
    assert ConductSpec.from_dict(c.to_dict()) == c


def test_demand_requires_negative_alpha():
    with pytest.raises(InvalidInput):
        DemandSpec(alpha=0.1)


def _market(**kw):
    d = dict(market_id=1, prices=[1.0, 2.0], shares=[0.2, 0.3], x=np.ones((2, 3)), w=np.ones((2, 3)), xi=[0.0, 0.0], ownership=np.eye(2))
    d.update(kw)
    return MarketData(**d)


def test_market_invariants():
    m = _market()
    assert m.J == 2 and m.outside_share == pytest.approx(0.5)
    for bad in (dict(shares=[0.6, 0.5]), dict(shares=[0.0, 0.3]), dict(prices=[-1.0, 1.0]),
                dict(ownership=[[1.0, 0.0], [0.0, 0.5]]), dict(ownership=[[1.0, 2.0], [0.0, 1.0]])):
        with pytest.raises(InvalidInput):
            _market(**bad)


def test_outside_diversion():
    s = np.array([0.2, 0.3])
    np.testing.assert_allclose(outside_diversion(s), [0.5 / 0.8, 0.5 / 0.7])
