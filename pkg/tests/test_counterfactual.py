import numpy as np
import pytest

from flexmerge import vmm
from flexmerge.counterfactual import (
    FlexibleModel,
    StructuralModel,
    flexible_shocks,
    median_share_market,
    passthrough_matrix,
    predict_merger_flexible,
    prediction_error_report,
    read_predictions,
    write_predictions,
)
from flexmerge.datagen import ScenarioConfig, apply_merger, generate
from flexmerge.equilibrium import SolverConfig, structural_supply
from flexmerge.errors import InvalidInput
from flexmerge.market_model import ConductSpec, DemandSpec, conduct_markup, logit_derivatives
from flexmerge.toolkit import true_post_merger

DEMAND = DemandSpec()
GAMMA = np.array([3.0, 6.0, 4.0])


@pytest.fixture(scope="module")
def data():
    ds = generate(ScenarioConfig(T=80, seed=6))
    return ds, apply_merger(ds, (1, 2))


@pytest.fixture(scope="module")
def tiny_fit(data):
    ds, _ = data
    return vmm.fit(ds, vmm.VmmConfig(f_hidden=(8, 8), stage1_epochs=20, stage2_epochs=20))


def test_no_merger_is_a_fixed_point(data, tiny_fit):
    ds, _ = data
    om = flexible_shocks(ds, tiny_fit.supply)
    eq = predict_merger_flexible(ds, tiny_fit.supply, om)
    assert eq.converged.all()
    np.testing.assert_allclose(eq.prices, ds.prices, atol=1e-5)


def test_structural_plug_in_reproduces_true_merger(data):
    ds, merged = data
    h = structural_supply(GAMMA, ConductSpec.bertrand())
    eq = predict_merger_flexible(merged, h, ds.omega)
    truth = true_post_merger(merged)
    assert eq.converged.all()
    np.testing.assert_allclose(eq.prices, truth.prices, atol=1e-5)


def test_flexible_merger_misaligned_shocks(data, tiny_fit):
    _, merged = data
    with pytest.raises(InvalidInput):
        predict_merger_flexible(merged, tiny_fit.supply, np.zeros(3))


def _market(data):
    ds, _ = data
    m = next(m for m in ds.markets if m.J == 3)
    return m, m.w @ GAMMA + m.omega


def test_perfect_competition_passthrough_is_identity(data):
    m, cost = _market(data)
    P = passthrough_matrix(m, StructuralModel(ConductSpec.perfect_competition(), cost), demand=DEMAND)
    np.testing.assert_allclose(P, np.eye(3), atol=1e-12)


def test_bertrand_passthrough_matches_implicit_function_oracle(data):
    m, cost = _market(data)

    def F(p):
        s = DEMAND.shares(p, m.x, m.xi)
        return p - conduct_markup(s, logit_derivatives(s, DEMAND.alpha), np.eye(3))

    p0 = m.prices
    Jf = np.empty((3, 3))
    for k in range(3):
        e = np.zeros(3)
        e[k] = 1e-6
        Jf[:, k] = (F(p0 + e) - F(p0 - e)) / 2e-6
    # F(p) = c, so dp/dc = Jf^{-1}
    oracle = np.linalg.inv(Jf)
    tight = SolverConfig(tol=1e-12, method="NewtonRoot")
    P = passthrough_matrix(m, StructuralModel(ConductSpec.bertrand(), cost), 1e-4, DEMAND, tight)
    np.testing.assert_allclose(P, oracle, atol=1e-4)


@pytest.mark.parametrize("conduct", [ConductSpec.bertrand(), ConductSpec.profit_weight(0.75)])
def test_passthrough_local_linearity(data, conduct):
    m, cost = _market(data)
    model = StructuralModel(conduct, cost)
    a = passthrough_matrix(m, model, 0.05, DEMAND)
    b = passthrough_matrix(m, model, 0.10, DEMAND)
    assert np.abs(a - b).max() < 0.05


def test_flexible_passthrough_with_structural_supply(data):
    m, cost = _market(data)
    flex = FlexibleModel(structural_supply(GAMMA, ConductSpec.bertrand()), m.omega)
    a = passthrough_matrix(m, flex, 0.10, DEMAND, cost_base=cost)
    b = passthrough_matrix(m, StructuralModel(ConductSpec.bertrand(), cost), 0.10, DEMAND)
    np.testing.assert_allclose(a, b, atol=1e-4)
    with pytest.raises(InvalidInput):
        passthrough_matrix(m, flex, 0.10, DEMAND)


def test_median_share_market(data):
    _, merged = data
    truth = true_post_merger(merged)
    t = median_share_market(merged, truth.shares)
    assert merged.affected[t]
    totals = np.add.reduceat(truth.shares, merged.layout.offsets[:-1])[np.array(merged.affected)]
    assert np.sum(totals < totals[list(np.flatnonzero(merged.affected)).index(t)]) == (totals.size - 1) // 2


def test_report_perfect_prediction():
    p = np.array([1.0, 2.0, 4.0])
    r = prediction_error_report(p, p)
    assert r.mse == 0 and all(v == 0 for v in r.quantiles.values())


def test_report_constant_offset():
    truth = np.full(10, 4.0)
    r = prediction_error_report(truth + 1.0, truth, market_ids=np.repeat(np.arange(5), 2))
    assert r.mse == 1.0
    assert r.quantiles[0.5] == pytest.approx(100.0 / 4.0)
    assert r.per_market == {i: 1.0 for i in range(5)}


def test_report_weights_and_mask():
    pred, truth = np.array([1.0, 3.0, 5.0]), np.array([1.0, 1.0, 1.0])
    assert prediction_error_report(pred, truth, weights=[1.0, 1.0, 2.0]).mse == pytest.approx((4 + 32) / 4)
    assert prediction_error_report(pred, truth, mask=[True, True, False]).mse == 2.0
    with pytest.raises(InvalidInput):
        prediction_error_report(pred, truth[:2])
    with pytest.raises(InvalidInput):
        prediction_error_report(pred, truth, mask=[False] * 3)


def test_prediction_csv_round_trip(tmp_path, data):
    _, merged = data
    truth = true_post_merger(merged).prices
    preds = {"A": truth + 0.1, "B": truth * 1.01}
    mask = np.repeat(np.array(merged.affected), merged.sizes)
    write_predictions(tmp_path / "p.csv", merged, preds, truth, mask)
    back = read_predictions(tmp_path / "p.csv")
    for label, prices in preds.items():
        mids, pred, true = back[label]
        np.testing.assert_array_equal(pred, prices[mask])
        np.testing.assert_array_equal(true, truth[mask])
        np.testing.assert_array_equal(mids, merged.product_market_ids[mask])
        assert prediction_error_report(pred, true).mse == prediction_error_report(prices, truth, mask=mask).mse
