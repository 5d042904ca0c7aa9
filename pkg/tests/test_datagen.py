import filecmp
from dataclasses import replace

import numpy as np
import pytest

from flexmerge.datagen import (
    TEST,
    TRAIN,
    Dataset,
    ScenarioConfig,
    apply_merger,
    generate,
    load_dataset,
    save_dataset,
    split,
    summary_statistics,
)
from flexmerge.errors import InvalidInput, MergerScopeError, StratificationError
from flexmerge.market_model import ConductSpec, conduct_markup


def test_generated_markets_satisfy_first_order_conditions(profit_weight_small):
    ds = profit_weight_small
    cost = ds.true_costs()
    D = ds.derivatives()
    for t, m in enumerate(ds.markets):
        assert m.J in (2, 3)
        sl = slice(ds.layout.offsets[t], ds.layout.offsets[t + 1])
        r = m.prices - cost[sl] - conduct_markup(m.shares, D[t], m.ownership)
        assert np.abs(r).max() <= 1e-6
        np.testing.assert_allclose(m.x[:, 0], 1.0)
        np.testing.assert_allclose(m.w[:, 0], 1.0)
        np.testing.assert_allclose(m.ownership, ConductSpec.profit_weight(0.75).ownership(m.firm_ids))


def test_generation_is_deterministic(tmp_path):
    cfg = ScenarioConfig(T=30, seed=9)
    save_dataset(generate(cfg), tmp_path / "a")
    save_dataset(generate(cfg), tmp_path / "b")
    for name in ("markets.csv", "scenario.json"):
        assert filecmp.cmp(tmp_path / "a" / name, tmp_path / "b" / name, shallow=False)


def test_different_seeds_differ():
    a = generate(ScenarioConfig(T=10, seed=1))
    b = generate(ScenarioConfig(T=10, seed=2))
    assert not np.array_equal(a.xi[:4], b.xi[:4])


def test_market_streams_are_prefix_stable():
    a = generate(ScenarioConfig(T=10, seed=5))
    b = generate(ScenarioConfig(T=20, seed=5))
    n = a.layout.n_products
    np.testing.assert_array_equal(a.xi, b.xi[:n])


def test_shock_correlation_large_sample():
    ds = generate(ScenarioConfig(T=4000, seed=0))
    st = summary_statistics(ds)
    assert abs(st["shock_correlation"] - 0.9) < 0.02
    assert abs(np.std(ds.x[:, 1]) - 0.25) < 0.02


def test_split_counts():
    ds = generate(ScenarioConfig(T=10, seed=0))
    s = split(ds, 0.8, 1)
    assert s.split_labels.count(TRAIN) == 8 and s.split_labels.count(TEST) == 2


def test_split_stratifies_by_product_count():
    ds = split(generate(ScenarioConfig(T=200, seed=1)), 0.8, 3)
    for J in (2, 3):
        n = np.sum(ds.sizes == J)
        n_train = sum(1 for lab, m in zip(ds.split_labels, ds.markets) if m.J == J and lab == TRAIN)
        assert abs(n_train - 0.8 * n) <= 1


def test_split_ignores_input_order():
    ds = generate(ScenarioConfig(T=50, seed=2))
    rng = np.random.default_rng(0)
    perm = rng.permutation(len(ds))
    shuffled = Dataset(tuple(ds.markets[i] for i in perm), ds.scenario)
    a = dict(zip(split(ds, 0.8, 7).market_ids, split(ds, 0.8, 7).split_labels))
    b = split(shuffled, 0.8, 7)
    assert a == dict(zip(b.market_ids, b.split_labels))


def test_split_errors():
    ds = generate(ScenarioConfig(T=1, seed=0))
    assert ds.split_labels is None
    with pytest.raises(StratificationError):
        split(ds, 0.8, 0)
    with pytest.raises(InvalidInput):
        split(generate(ScenarioConfig(T=4, seed=0)), 1.0, 0)


def test_merger_triopoly_block(bertrand_small):
    merged = apply_merger(bertrand_small, (1, 2))
    for m, old, hit in zip(merged.markets, bertrand_small.markets, merged.affected):
        if m.J == 3:
            assert hit
            np.testing.assert_array_equal(m.ownership, [[1, 0, 0], [0, 1, 1], [0, 1, 1]])
            np.testing.assert_array_equal(m.omega, old.omega)
        else:
            assert not hit
            np.testing.assert_array_equal(m.ownership, old.ownership)


def test_merger_duopoly_becomes_monopoly(bertrand_small):
    merged = apply_merger(bertrand_small, (0, 1))
    for m in merged.markets:
        if m.J == 2:
            np.testing.assert_array_equal(m.ownership, np.ones((2, 2)))


def test_merger_scope_errors(bertrand_small):
    duo = next(m.market_id for m in bertrand_small.markets if m.J == 2)
    with pytest.raises(MergerScopeError):
        apply_merger(bertrand_small, (1, 2), markets=[duo])
    with pytest.raises(MergerScopeError):
        apply_merger(bertrand_small, (5, 6))
    with pytest.raises(InvalidInput):
        apply_merger(bertrand_small, (1, 1))


def test_csv_round_trip_is_bit_exact(tmp_path, profit_weight_small):
    merged = apply_merger(profit_weight_small, (1, 2))
    save_dataset(merged, tmp_path)
    back = load_dataset(tmp_path)
    assert back.scenario == merged.scenario
    assert back.split_labels == merged.split_labels
    assert back.affected == merged.affected and back.merger == merged.merger
    for name in ("prices", "shares", "x", "w", "xi", "omega", "h_flat", "firm_ids"):
        np.testing.assert_array_equal(getattr(back, name), getattr(merged, name))


def test_target_observations():
    ds = generate(ScenarioConfig(T=1, seed=0, target_observations=50))
    assert 50 <= ds.layout.n_products < 53


def test_scenario_validation():
    for bad in (dict(T=0), dict(shock_corr=1.0), dict(split_fraction=0.0), dict(firm_weights=(0.3, 0.3))):
        with pytest.raises(InvalidInput):
            ScenarioConfig(**bad)
    cfg = ScenarioConfig(conduct=ConductSpec.profit_weight(0.75))
    assert ScenarioConfig.from_dict(cfg.to_dict()) == cfg
