import numpy as np
import pytest

from flexmerge import nets, vmm
from flexmerge.datagen import TRAIN, ScenarioConfig, generate
from flexmerge.errors import EncodingError, InvalidInput
from flexmerge.market_model import DemandSpec, MarketData, logit_derivatives
from flexmerge.nets import NetSpec
from flexmerge.vmm import (
    SupplyEncoding,
    VmmBatch,
    VmmConfig,
    encode,
    fit_arrays,
    monotonicity_penalty,
    vmm_objective,
)

ALPHA = -0.25
LINEAR_LM = dict(h_hidden=(), f_hidden=(), optimizer="LevenbergMarquardt", lr_model=1.0, validation_fraction=0)


def _market(shares, w=None, H=None, firm_ids=None):
    J = len(shares)
    w = np.column_stack([np.ones(J), np.arange(2 * J, dtype=float).reshape(J, 2) + 1]) if w is None else w
    return MarketData(0, np.full(J, 10.0), shares, np.ones((J, 3)), w, np.zeros(J), np.eye(J) if H is None else H, None, firm_ids)


@pytest.mark.parametrize("aggregate", [True, False])
def test_symmetric_duopoly_encodings_swap(aggregate):
    enc = SupplyEncoding(aggregate_firms=aggregate)
    w = np.array([[1.0, 0.9, 1.1], [1.0, 0.9, 1.1]])
    m = _market([0.3, 0.3], w)
    D = logit_derivatives(m.shares, ALPHA)
    np.testing.assert_array_equal(encode(m, D, 0, enc), encode(m, D, 1, enc))
    m2 = _market([0.3, 0.2], np.array([[1.0, 0.9, 1.1], [1.0, 1.2, 0.8]]))
    D2 = logit_derivatives(m2.shares, ALPHA)
    e0, e1 = encode(m2, D2, 0, enc), encode(m2, D2, 1, enc)
    assert e0[0] == 0.3 and e0[1] == 0.2 and e1[0] == 0.2 and e1[1] == 0.3


@pytest.mark.parametrize("aggregate", [True, False])
def test_padding_layout(aggregate):
    enc = SupplyEncoding(aggregate_firms=aggregate)
    names = enc.feature_names()
    assert len(names) == enc.n_features
    tri = _market([0.2, 0.3, 0.1])
    duo = _market([0.2, 0.3])
    x3 = encode(tri, logit_derivatives(tri.shares, ALPHA), 0, enc)
    x2 = encode(duo, logit_derivatives(duo.shares, ALPHA), 0, enc)
    for slot in ("rival_share_2", "d_rival_2"):
        assert x2[names.index(slot)] == 0.0
        assert x3[names.index(slot)] != 0.0
    assert x3[names.index("n_firms")] == 3 and x2[names.index("n_firms")] == 2
    # own entry first, rivals descending
    assert x3[0] == 0.2 and x3[1] == 0.3 and x3[2] == 0.1
    assert x3[names.index("d_own")] == pytest.approx(ALPHA * 0.2 * 0.8)


def test_rival_order_does_not_matter():
    enc = SupplyEncoding()
    s = np.array([0.2, 0.3, 0.1])
    w = np.array([[1.0, 0.8, 1.2], [1.0, 1.1, 0.9], [1.0, 1.0, 1.3]])
    m = _market(s, w)
    perm = [0, 2, 1]
    mp = _market(s[perm], w[perm])
    np.testing.assert_array_equal(
        encode(m, logit_derivatives(s, ALPHA), 0, enc), encode(mp, logit_derivatives(s[perm], ALPHA), 0, enc)
    )


def test_firm_aggregation_treats_merged_triopoly_as_duopoly():
    enc = SupplyEncoding()
    s3 = np.array([0.2, 0.15, 0.1])
    H = np.array([[1, 0, 0], [0, 1, 1], [0, 1, 1]], dtype=float)
    m3 = _market(s3, H=H)
    x = encode(m3, logit_derivatives(s3, ALPHA), 1, enc)
    names = enc.feature_names()
    assert x[0] == pytest.approx(0.25)
    assert x[names.index("n_firms")] == 2
    assert x[names.index("rival_share_2")] == 0.0
    assert x[names.index("d_own")] == pytest.approx(ALPHA * 0.25 * 0.75)


def test_encoding_errors():
    enc = SupplyEncoding(max_products=2)
    m = _market([0.2, 0.3, 0.1])
    with pytest.raises(EncodingError):
        encode(m, logit_derivatives(m.shares, ALPHA), 0, enc)
    with pytest.raises(EncodingError):
        encode(_market([0.2, 0.3]), logit_derivatives([0.2, 0.3], ALPHA), 2, SupplyEncoding())


def test_without_derivatives():
    enc = SupplyEncoding(include_derivatives=False)
    m = _market([0.2, 0.3])
    assert encode(m, logit_derivatives(m.shares, ALPHA), 0, enc).size == enc.n_features
    assert "d_own" not in enc.feature_names()


def test_instruments_exclude_cost_shifters(bertrand_small):
    inst = vmm.instruments(bertrand_small)
    assert inst.excluded == ("x1", "x2")
    assert not any(n.startswith("w") for n in inst.names)
    np.testing.assert_array_equal(inst.z[:, 0], bertrand_small.x[:, 1])
    m0 = bertrand_small.markets[0]
    np.testing.assert_allclose(inst.z[0, 2], m0.x[1:, 1].sum())
    assert inst.z[0, 4] == m0.J - 1


def _batch(rng, n=50):
    h = NetSpec(3, (3,), init_seed=1)
    f = NetSpec(2, (4,), init_seed=2)
    return VmmBatch(h, f, rng.normal(size=(n, 3)), rng.normal(size=(n, 2)), rng.normal(size=n))


def test_objective_zero_critic(rng):
    b = _batch(rng)
    th = nets.init(b.h_spec)
    assert vmm_objective(th, np.zeros(b.f_spec.n_params), th, b, reg=0.3) == pytest.approx(-0.3)


def test_objective_perfect_fit(rng):
    b = _batch(rng)
    th = nets.init(b.h_spec)
    exact = VmmBatch(b.h_spec, b.f_spec, b.X, b.Z, nets.forward(b.h_spec, th, b.X)[:, 0])
    th_tilde = th + 0.1
    f = nets.init(b.f_spec)
    val = vmm_objective(th, f, th_tilde, exact)
    fz = nets.forward(b.f_spec, f, b.Z)[:, 0]
    om_t = exact.p - nets.forward(b.h_spec, th_tilde, b.X)[:, 0]
    assert val == pytest.approx(-0.25 * np.mean((fz * om_t) ** 2), rel=1e-12)
    assert val <= 0


def test_profiled_last_layer_is_the_inner_maximum(rng):
    b = _batch(rng, 200)
    crit = vmm._Critic(b.f_spec, b.Z, 0.0)
    psi = nets.init(b.f_spec)
    omega = rng.normal(size=200)
    v = omega**2 + 0.1
    Phi = crit.features(psi)
    best, a = crit.profile(Phi, omega, v)
    inner = lambda c: np.mean((Phi @ c) * omega) - 0.25 * np.mean((Phi @ c) ** 2 * v)
    assert inner(2 * a) == pytest.approx(best, rel=1e-10)
    for _ in range(20):
        assert inner(2 * a + 0.1 * rng.normal(size=a.size)) <= best + 1e-12
    # the stored critic reproduces the same function
    psi2 = crit.set_last(psi, a)
    np.testing.assert_allclose(nets.forward(b.f_spec, psi2, b.Z)[:, 0], Phi @ (2 * a), rtol=1e-12)


def test_critic_ascent_never_decreases(rng):
    b = _batch(rng, 300)
    crit = vmm._Critic(NetSpec(2, (6, 6), init_seed=4), b.Z, 1e-8)
    psi = nets.init(crit.spec)
    omega = np.sin(b.Z[:, 0]) + 0.3 * rng.normal(size=300)
    _, vals = crit.ascend(psi, omega, np.ones(300), 0.5, 40)
    assert np.all(np.diff(vals) >= -1e-9)
    assert vals[-1] > vals[0]


def _linear_iv(seed, n=1000):
    rng = np.random.default_rng(seed)
    z = rng.normal(size=(n, 2))
    u = rng.normal(size=n)
    x = z @ [1.0, 0.5] + u
    e = (0.8 * u + 0.6 * rng.normal(size=n)) * (1 + 0.5 * np.abs(z[:, 0]))
    return x, z, 1.0 + 2.0 * x + e


def _coef(af, th):
    W, b = nets.unpack(af.h_spec, th)[0]
    slope = af.p_scale * W[0, 0] / af.x_norm.scale[0]
    return np.array([af.p_mean + af.p_scale * b[0] - slope * af.x_norm.mean[0], slope])


def test_linear_iv_reduces_to_2sls_and_gmm():
    x, z, p = _linear_iv(0)
    n = p.size
    af = fit_arrays(x[:, None], z, p, VmmConfig(stage1_epochs=60, stage2_epochs=60, **LINEAR_LM))
    Xc = np.column_stack([np.ones(n), x])
    Zc = np.column_stack([np.ones(n), z])
    P = Zc @ np.linalg.solve(Zc.T @ Zc, Zc.T @ Xc)
    tsls = np.linalg.solve(P.T @ Xc, P.T @ p)
    # two-step GMM weighted by the first-step residuals
    r = p - Xc @ tsls
    S = (Zc * r[:, None] ** 2).T @ Zc / n
    A = Zc.T @ Xc / n
    gmm = np.linalg.solve(A.T @ np.linalg.solve(S, A), A.T @ np.linalg.solve(S, Zc.T @ p / n))
    np.testing.assert_allclose(_coef(af, af.theta_tilde), tsls, rtol=1e-3)
    np.testing.assert_allclose(_coef(af, af.theta_hat), gmm, rtol=1e-3)


def test_noiseless_recovery():
    rng = np.random.default_rng(1)
    z = rng.normal(size=(500, 3))
    X = z[:, :2] + 0.3 * z[:, 2:3]
    p = 5.0 + X @ [1.5, -0.7]
    af = fit_arrays(X, z, p, VmmConfig(stage1_epochs=40, stage2_epochs=0, **LINEAR_LM))
    assert np.mean((p - af.predict(X)) ** 2) < 1e-3


def test_noiseless_recovery_adam():
    rng = np.random.default_rng(2)
    z = rng.normal(size=(400, 2))
    X = z + 0.2 * rng.normal(size=(400, 2))
    p = 3.0 + X @ [1.0, 0.5]
    cfg = VmmConfig(h_hidden=(), f_hidden=(8,), stage1_epochs=400, stage2_epochs=0, lr_model=0.05, validation_fraction=0)
    af = fit_arrays(X, z, p, cfg)
    assert np.mean((p - af.predict(X)) ** 2) < 1e-3


def test_monotonicity_penalty_examples(rng):
    P = np.column_stack([np.arange(3.0), np.zeros(3)])
    assert monotonicity_penalty(lambda X: np.full(len(X), 2.0), P) == 0.0
    assert monotonicity_penalty(lambda X: X[:, 0], P) == 2.0
    spec = NetSpec(2, (4,), init_seed=5)
    th = nets.init(spec)
    h = lambda X: nets.forward(spec, th, X)[:, 0]
    Q = np.column_stack([np.sort(rng.normal(size=12)), np.full(12, 0.3)])
    vals = [h(Q[i : i + 1])[0] for i in range(12)]
    ref = sum(max(vals[i] - vals[i - 1], 0.0) ** 2 for i in range(1, 12))
    assert monotonicity_penalty(h, Q) == pytest.approx(ref, rel=1e-12)


def test_probe_checks():
    P = np.column_stack([np.arange(3.0), np.zeros(3)])
    vmm.check_probe(P, 0)
    with pytest.raises(InvalidInput):
        vmm.check_probe(P[::-1], 0)
    Q = P.copy()
    Q[1, 1] = 1.0
    with pytest.raises(InvalidInput):
        vmm.check_probe(Q, 0)


@pytest.fixture(scope="module")
def tiny():
    ds = generate(ScenarioConfig(T=60, seed=1))
    cfg = VmmConfig(f_hidden=(8, 8), stage1_epochs=25, stage2_epochs=25)
    return ds, cfg, vmm.fit(ds, cfg)


def test_residual_identity(tiny):
    ds, cfg, res = tiny
    train = ds.split_subset(TRAIN)
    X = vmm.encode_dataset(train, res.supply.enc)
    s = res.supply
    h = s.p_mean + s.p_scale * nets.forward(s.spec, res.theta_hat, (X - s.x_norm.mean) / s.x_norm.scale)[:, 0]
    np.testing.assert_allclose(res.residuals, train.prices - h, rtol=0, atol=1e-12)
    assert res.train_mse == pytest.approx(np.mean(res.residuals**2))
    assert res.test_mse is not None


def test_seed_determinism(tiny):
    ds, cfg, res = tiny
    again = vmm.fit(ds, cfg)
    assert again.theta_hat.tobytes() == res.theta_hat.tobytes()
    other = vmm.fit(ds, VmmConfig.from_dict({**cfg.to_dict(), "seed": 1}))
    assert not np.array_equal(other.theta_hat, res.theta_hat)


def test_result_round_trip(tiny, tmp_path):
    ds, cfg, res = tiny
    vmm.save_result(res, tmp_path)
    back = vmm.load_result(tmp_path)
    assert back.theta_hat.tobytes() == res.theta_hat.tobytes()
    assert back.theta_tilde.tobytes() == res.theta_tilde.tobytes()
    assert back.residuals.tobytes() == res.residuals.tobytes()
    assert back.config == cfg
    np.testing.assert_array_equal(back.supply.on_dataset(ds), res.supply.on_dataset(ds))
    assert (tmp_path / "training_log.json").exists() and (tmp_path / "f.ckpt").exists()


def test_strong_monotonicity_penalty_orders_the_probe():
    ds = generate(ScenarioConfig(T=60, seed=2))
    cfg = VmmConfig(f_hidden=(8, 8), stage1_epochs=150, stage2_epochs=0, regularizer=vmm.Regularizer.monotone(1e4))
    res = vmm.fit(ds, cfg)
    enc = res.supply.enc
    X = vmm.encode_dataset(ds.split_subset(TRAIN), enc)
    P = vmm.make_probes(X, enc, 20, 16, np.random.default_rng(0))
    vals = res.supply.evaluate(P.reshape(-1, P.shape[-1])).reshape(P.shape[:2])
    assert np.max(np.diff(vals, axis=1)) <= 1e-6


def test_config_validation():
    for bad in (dict(stage1_epochs=0), dict(critic_steps_per_model_step=0), dict(lr_model=0.0), dict(optimizer="SGD")):
        with pytest.raises(InvalidInput):
            VmmConfig(**bad)
    cfg = VmmConfig(regularizer=vmm.Regularizer.ridge_(0.1))
    assert VmmConfig.from_dict(cfg.to_dict()) == cfg


def test_empty_training_split_is_invalid(bertrand_small):
    only_test = bertrand_small.subset([lab != TRAIN for lab in bertrand_small.split_labels])
    with pytest.raises(InvalidInput):
        vmm.fit(only_test, VmmConfig(stage1_epochs=1, stage2_epochs=0))
