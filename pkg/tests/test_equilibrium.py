import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.optimize import brentq

from flexmerge.datagen import ScenarioConfig, apply_merger, generate
from flexmerge.equilibrium import (
    SolverConfig,
    SolverMethod,
    solve_flexible,
    solve_structural,
    solve_structural_batch,
    structural_supply,
)
from flexmerge.errors import InvalidInput, NonConvergence
from flexmerge.market_model import ConductSpec, DemandSpec, conduct_markup, logit_derivatives

DEMAND = DemandSpec()


def _draw(rng, J):
    x = np.column_stack([np.ones(J), rng.normal(1, 0.25, (J, 2))])
    w = np.column_stack([np.ones(J), rng.normal(1, 0.25, (J, 2))])
    xi = rng.normal(size=J)
    omega = 0.9 * xi + np.sqrt(1 - 0.81) * rng.normal(size=J)
    return x, w, xi, w @ np.array([3.0, 6.0, 4.0]) + omega


def _residual(p, x, xi, cost, H):
    s = DEMAND.shares(p, x, xi)
    return p - cost - conduct_markup(s, logit_derivatives(s, DEMAND.alpha), H)


def test_single_product_matches_bisection():
    x = np.array([[1.0, 1.1, 0.9]])
    xi = np.array([0.3])
    cost = np.array([12.0])
    res = solve_structural(DEMAND, x, xi, cost, np.eye(1))
    f = lambda p: p - cost[0] + 1.0 / (DEMAND.alpha * (1 - DEMAND.shares([p], x, xi)[0]))
    ref = brentq(f, cost[0], cost[0] + 100, xtol=1e-14)
    assert res.converged
    assert res.prices[0] == pytest.approx(ref, abs=1e-8)


def test_perfect_competition_prices_equal_cost(rng):
    x, w, xi, cost = _draw(rng, 3)
    res = solve_structural(DEMAND, x, xi, cost, np.eye(3), conduct=ConductSpec.perfect_competition())
    np.testing.assert_array_equal(res.prices, cost)
    assert res.iterations == 0


@pytest.mark.parametrize("conduct", [ConductSpec.bertrand(), ConductSpec.monopoly(), ConductSpec.profit_weight(0.75)])
@pytest.mark.parametrize("method", list(SolverMethod))
def test_methods_converge_and_agree(conduct, method, rng):
    for J in (1, 2, 3):
        x, w, xi, cost = _draw(rng, J)
        H = conduct.ownership(np.arange(J))
        cfg = SolverConfig(method=method)
        res = solve_structural(DEMAND, x, xi, cost, H, cfg)
        ref = solve_structural(DEMAND, x, xi, cost, H, SolverConfig(method=SolverMethod.ZETA))
        assert res.converged and res.residual_norm <= cfg.tol
        assert np.abs(_residual(res.prices, x, xi, cost, H)).max() <= cfg.tol
        np.testing.assert_allclose(res.prices, ref.prices, atol=10 * cfg.tol)
        assert np.all(res.prices >= cost)


@given(st.integers(0, 2**31 - 1), st.sampled_from([2, 3]))
def test_zeta_and_newton_agree(seed, J):
    rng = np.random.default_rng(seed)
    x, w, xi, cost = _draw(rng, J)
    H = np.eye(J)
    a = solve_structural(DEMAND, x, xi, cost, H, SolverConfig(method="ZetaFixedPoint"))
    b = solve_structural(DEMAND, x, xi, cost, H, SolverConfig(method="NewtonRoot"))
    np.testing.assert_allclose(a.prices, b.prices, atol=1e-5)


def test_non_convergence_reports_residual(rng):
    x, w, xi, cost = _draw(rng, 3)
    with pytest.raises(NonConvergence) as exc:
        solve_structural(DEMAND, x, xi, cost, np.eye(3), SolverConfig(max_iter=1, method="ZetaFixedPoint"))
    assert exc.value.residual > 1e-6


def test_solver_config_validation():
    for bad in (dict(tol=0), dict(max_iter=0), dict(damping=0), dict(damping=1.5), dict(method="Secant")):
        with pytest.raises((InvalidInput, ValueError)):
            SolverConfig(**bad)


def test_rejects_non_finite_cost(rng):
    x, w, xi, cost = _draw(rng, 2)
    with pytest.raises(InvalidInput):
        solve_structural(DEMAND, x, xi, np.array([np.nan, 1.0]), np.eye(2))


@pytest.mark.parametrize("conduct", [ConductSpec.bertrand(), ConductSpec.profit_weight(0.75)])
def test_flexible_with_structural_supply_reproduces_structural(conduct, rng):
    gamma = np.array([3.0, 6.0, 4.0])
    h = structural_supply(gamma, conduct)
    for J in (2, 3):
        x, w, xi, cost = _draw(rng, J)
        omega = cost - w @ gamma
        H = conduct.ownership(np.arange(J))
        a = solve_structural(DEMAND, x, xi, cost, H)
        b = solve_flexible(h, DEMAND, x, xi, omega, w, H)
        np.testing.assert_allclose(b.prices, a.prices, atol=1e-5)
        Hm = np.ones((J, J))
        a = solve_structural(DEMAND, x, xi, cost, Hm)
        b = solve_flexible(h, DEMAND, x, xi, omega, w, Hm, p0=cost)
        np.testing.assert_allclose(b.prices, a.prices, atol=1e-5)


def test_flexible_constant_supply(rng):
    x, w, xi, _ = _draw(rng, 3)
    h = lambda s, D, w, H: np.full(s.shape, 7.5)
    res = solve_flexible(h, DEMAND, x, xi, np.zeros(3), w, np.eye(3))
    np.testing.assert_allclose(res.prices, 7.5)
    assert res.iterations == 0


def test_batch_residuals_on_generated_markets():
    ds = generate(ScenarioConfig(T=200, seed=11))
    eq = solve_structural_batch(DEMAND, ds.layout, ds.delta0(), ds.true_costs(), ds.h_flat)
    assert eq.converged.all()
    assert eq.residual_norms.max() <= 1e-6
    np.testing.assert_allclose(eq.prices, ds.prices, atol=1e-9)


def test_merger_raises_merging_prices():
    ds = generate(ScenarioConfig(T=200, seed=5))
    merged = apply_merger(ds, (1, 2))
    eq = solve_structural_batch(DEMAND, merged.layout, merged.delta0(), merged.true_costs(), merged.h_flat, p0=merged.prices)
    rises = []
    for t, m in enumerate(merged.markets):
        if not merged.affected[t]:
            continue
        post = eq.market(t).prices
        sel = np.isin(m.firm_ids, [1, 2])
        rises.append(np.all(post[sel] > m.prices[sel]))
    assert np.mean(rises) >= 0.99
