import numpy as np
import pytest

from flexmerge import validators
from flexmerge.datagen import ScenarioConfig, generate
from flexmerge.vmm import InstrumentSet, instruments


def _inst(names, excluded, z=None):
    z = np.random.default_rng(0).normal(size=(20, len(names))) if z is None else z
    return InstrumentSet(z, tuple(names), tuple(excluded))


def test_w_column_in_z_is_flagged():
    rep = validators.check_exclusion(_inst(["x1", "w1"], ["x1"]), ["w1", "w2"])
    assert not rep.passed
    assert any("w1" in v for v in rep.violations)


def test_duplicated_w_data_is_flagged():
    z = np.random.default_rng(1).normal(size=(20, 2))
    rep = validators.check_exclusion(_inst(["x1", "rival"], ["x1"], z), {"w1": z[:, 1].copy()})
    assert not rep.passed and "duplicates" in rep.violations[0]


def test_excluded_shifter_only_passes():
    rep = validators.check_exclusion(_inst(["x1"], ["x1"]), ["w1", "w2"])
    assert rep.passed and rep.excluded_present == ("x1",)


def test_missing_excluded_shifter_fails():
    rep = validators.check_exclusion(_inst(["n_rivals"], []), ["w1"])
    assert not rep.passed


def test_first_stage_r2_oracle(rng):
    z = rng.normal(size=(200, 2))
    y = z @ [1.0, -2.0] + rng.normal(size=200)
    X = np.column_stack([np.ones(200), z])
    fitted = X @ np.linalg.lstsq(X, y, rcond=None)[0]
    ref = np.corrcoef(fitted, y)[0, 1] ** 2
    assert validators.first_stage_r2(y, z) == pytest.approx(ref, rel=1e-10)
    assert validators.first_stage_r2(np.ones(5), rng.normal(size=(5, 1))) == 0.0


def test_generated_data_relevance_and_purity(tmp_path):
    ds = generate(ScenarioConfig(T=1000, seed=0))
    rep = validators.dataset_report(ds)
    assert rep.passed
    assert rep.r_squared["own_share"] > 0.1
    assert validators.dataset_report(ds) == rep
    rep.write_csv(tmp_path / "v.csv")
    text = rep.to_text()
    assert "pass" in text and "not testable" in text
    lines = (tmp_path / "v.csv").read_text().splitlines()
    assert lines[0] == "check,item,value" and "relevance,own_share" in lines[-2]
