"""Variational Method of Moments estimation of a flexible supply function.

The supply relation is ``p_j = h(encode(s, D, w_j; H)) + omega_j`` with a
single network ``h`` shared across products.  Identification comes from the
conditional moment ``E[omega | z, w] = 0``; the critic ``f`` is a network
of the instruments whose last affine layer is profiled out in closed form.
For critic features ``Phi`` the inner supremum of

    (1/n) sum f_i omega_i - (1/4n) sum f_i^2 v_i

over the last layer is attained at ``a = 2 S^{-1} g`` with
``g = Phi' omega / n`` and ``S = Phi' diag(v) Phi / n``, and equals
``g' S^{-1} g``.  Stage 1 uses ``v = 1``; stage 2 uses ``v = omega(theta_tilde)^2``.
The remaining critic layers ascend the profiled value, the model descends it.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import nets
from .datagen import TRAIN, Dataset
from .errors import EncodingError, InvalidInput, TrainingDiverged
from .nets import NetSpec

_CO_OWNED = 1.0 - 1e-12


# ---------------------------------------------------------------------------
# encoding


@dataclass(frozen=True)
class SupplyEncoding:
    """Layout of the supply-network input for one product.

    Slots, in order: own share; rival shares sorted descending and
    zero-padded to ``max_products - 1``; own row of ``D`` (own entry first,
    rivals in the same order) when ``include_derivatives``; own cost
    shifters without the constant; ownership features; number of firms.

    With ``aggregate_firms`` (default) shares and derivatives are summed
    within co-owned groups (``H_jk == 1``), so a product of a multi-product
    firm is described by its firm's aggregate share and the firm-level
    derivative block, and the only ownership feature is the largest
    conduct weight placed on a rival firm.  Without it the product-level
    layout is used and the ownership features are the number of co-owned
    products, their summed share and the largest off-diagonal ``H`` entry.
    """

    max_products: int = 3
    include_derivatives: bool = True
    aggregate_firms: bool = True
    n_cost_shifters: int = 2

    def __post_init__(self):
        if self.max_products < 1 or self.n_cost_shifters < 0:
            raise InvalidInput("invalid encoding dimensions")

    @property
    def n_features(self) -> int:
        J = self.max_products
        own = 1 if self.aggregate_firms else 3
        return 1 + (J - 1) + (J if self.include_derivatives else 0) + self.n_cost_shifters + own + 1

    def feature_names(self) -> list:
        J = self.max_products
        names = ["own_share"] + [f"rival_share_{k}" for k in range(1, J)]
        if self.include_derivatives:
            names += ["d_own"] + [f"d_rival_{k}" for k in range(1, J)]
        names += [f"w{k}" for k in range(1, self.n_cost_shifters + 1)]
        if self.aggregate_firms:
            names += ["kappa_proxy"]
        else:
            names += ["n_co_owned", "co_owned_share", "kappa_proxy"]
        return names + ["n_firms"]

    def to_dict(self) -> dict:
        return {
            "max_products": self.max_products,
            "include_derivatives": self.include_derivatives,
            "aggregate_firms": self.aggregate_firms,
            "n_cost_shifters": self.n_cost_shifters,
        }


def encode_batch(shares, D, w, H, enc: SupplyEncoding) -> np.ndarray:
    """Encode every product of a stack of equal-size markets.

    Shapes: ``shares`` (M, J), ``D`` (M, J, J), ``w`` (M, J, K_w) with the
    constant in column 0, ``H`` (M, J, J).  Returns (M, J, n_features).
    """
    s = np.asarray(shares, dtype=float)
    D = np.asarray(D, dtype=float)
    w = np.asarray(w, dtype=float)
    H = np.asarray(H, dtype=float)
    if s.ndim != 2:
        raise EncodingError("shares must be stacked as (markets, products)")
    M, J = s.shape
    if J > enc.max_products:
        raise EncodingError(f"{J} products exceed the encoding's max_products={enc.max_products}")
    if D.shape != (M, J, J) or H.shape != (M, J, J) or w.shape[:2] != (M, J):
        raise EncodingError("shares, D, w and H do not conform")
    if w.shape[2] - 1 != enc.n_cost_shifters:
        raise EncodingError(f"expected {enc.n_cost_shifters} cost shifters besides the constant, got {w.shape[2] - 1}")
    eye = np.eye(J, dtype=bool)
    co = (H >= _CO_OWNED) | eye
    C = co.astype(float)
    if enc.aggregate_firms:
        own_s = np.einsum("mjk,mk->mj", C, s)
        DF = C @ D @ np.swapaxes(C, 1, 2)
        # the first product of each co-owned group stands in for its firm
        rep = np.argmax(co, axis=2) == np.arange(J)
        rival = ~co & rep[:, None, :]
        rival_s = np.broadcast_to(own_s[:, None, :], (M, J, J))
        rival_d = DF
        own_d = np.diagonal(DF, axis1=1, axis2=2)
        n_firms = rep.sum(axis=1)
    else:
        own_s = s
        rival = ~eye[None].repeat(M, axis=0)
        rival_s = np.broadcast_to(s[:, None, :], (M, J, J))
        rival_d = D
        own_d = np.diagonal(D, axis1=1, axis2=2)
        n_firms = np.full(M, J)
    # rivals sorted by share, descending; ties keep index order
    key = np.where(rival, rival_s, -np.inf)
    order = np.argsort(-key, axis=2, kind="stable")
    take = lambda a: np.take_along_axis(np.broadcast_to(a, (M, J, J)), order, axis=2)
    mask = take(rival)
    rs = np.where(mask, take(rival_s), 0.0)
    rd = np.where(mask, take(rival_d), 0.0)
    pad = enc.max_products - 1
    cols = [own_s[..., None], _pad(rs[..., : J - 1] if J > 1 else rs[..., :0], pad)]
    if enc.include_derivatives:
        cols += [own_d[..., None], _pad(rd[..., : J - 1] if J > 1 else rd[..., :0], pad)]
    cols.append(w[..., 1:])
    off = np.where(eye, -np.inf, H)
    if enc.aggregate_firms:
        kap = np.where(co, -np.inf, H).max(axis=2) if J > 1 else np.zeros((M, J))
        cols.append(np.where(np.isfinite(kap), kap, 0.0)[..., None])
    else:
        n_co = co.sum(axis=2) - 1.0
        s_co = np.einsum("mjk,mk->mj", C, s) - s
        kap = off.max(axis=2) if J > 1 else np.zeros((M, J))
        cols += [n_co[..., None], s_co[..., None], kap[..., None]]
    cols.append(np.broadcast_to(n_firms[:, None, None], (M, J, 1)).astype(float))
    return np.concatenate(cols, axis=2)


def _pad(a, width):
    M, J, k = a.shape
    if k >= width:
        return a[..., :width]
    return np.concatenate([a, np.zeros((M, J, width - k))], axis=2)


def encode(market, D, j: int, enc: SupplyEncoding) -> np.ndarray:
    """Input vector of product ``j`` in one market."""
    if not 0 <= j < market.J:
        raise EncodingError(f"product index {j} out of range for J={market.J}")
    X = encode_batch(market.shares[None], np.asarray(D)[None], market.w[None], market.ownership[None], enc)
    return X[0, j]


def encode_dataset(dataset: Dataset, enc: SupplyEncoding, demand=None) -> np.ndarray:
    """Encoded inputs for all products in dataset order, shape (n, n_features)."""
    demand = demand or dataset.demand
    out = np.empty((dataset.layout.n_products, enc.n_features))
    for J, midx, pidx in dataset.layout.groups():
        s = dataset.shares[pidx]
        H = dataset.layout.stack_h(dataset.h_flat, midx, J)
        out[pidx] = encode_batch(s, demand.derivatives(s), dataset.w[pidx], H, enc)
    return out


# ---------------------------------------------------------------------------
# instruments


@dataclass(frozen=True)
class InstrumentSet:
    """Instrument matrix with column metadata.

    ``excluded`` lists the columns that are demand shifters excluded from
    cost; ``names`` labels every column.
    """

    z: np.ndarray
    names: tuple
    excluded: tuple


def instruments(dataset: Dataset) -> InstrumentSet:
    """Own demand shifters, sums of rival characteristics and the rival count.

    Rivals are products not co-owned with the product under ``H``.  Cost
    shifters are never included.
    """
    kx = dataset.x.shape[1] - 1
    rows = []
    for m in dataset.markets:
        co = (m.ownership >= _CO_OWNED) | np.eye(m.J, dtype=bool)
        rival = ~co
        own = m.x[:, 1:]
        rsum = rival.astype(float) @ m.x[:, 1:]
        rows.append(np.column_stack([own, rsum, rival.sum(axis=1)]))
    names = tuple([f"x{k}" for k in range(1, kx + 1)] + [f"rival_x{k}" for k in range(1, kx + 1)] + ["n_rivals"])
    return InstrumentSet(np.concatenate(rows), names, names[:kx])


def critic_inputs(dataset: Dataset, include_w: bool = True) -> np.ndarray:
    """Conditioning variables of the critic: instruments, optionally with own cost shifters."""
    z = instruments(dataset).z
    return np.column_stack([z, dataset.w[:, 1:]]) if include_w else z


# ---------------------------------------------------------------------------
# normalization


@dataclass(frozen=True)
class Standardizer:
    mean: np.ndarray
    scale: np.ndarray

    @classmethod
    def fit(cls, X) -> "Standardizer":
        X = np.asarray(X, dtype=float)
        mean = X.mean(axis=0)
        sd = X.std(axis=0)
        # columns without variation carry no information the fit could use
        scale = np.where(sd > 1e-12 * (1.0 + np.abs(mean)), sd, np.inf)
        return cls(mean, scale)

    def __call__(self, X):
        return (np.asarray(X, dtype=float) - self.mean) / self.scale

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "scale": [None if not np.isfinite(v) else v for v in self.scale.tolist()]}

    @classmethod
    def from_dict(cls, d) -> "Standardizer":
        return cls(np.array(d["mean"], dtype=float), np.array([np.inf if v is None else v for v in d["scale"]], dtype=float))


# ---------------------------------------------------------------------------
# configuration and results


@dataclass(frozen=True)
class Regularizer:
    """``kind`` is one of None, "Ridge", "Monotonicity", "Ridge+Monotonicity"."""

    kind: str | None = None
    ridge: float = 0.0
    monotonicity: float = 0.0

    @classmethod
    def none(cls):
        return cls()

    @classmethod
    def ridge_(cls, lam):
        return cls("Ridge", float(lam), 0.0)

    @classmethod
    def monotone(cls, lam):
        return cls("Monotonicity", 0.0, float(lam))

    def __post_init__(self):
        if self.kind not in (None, "Ridge", "Monotonicity", "Ridge+Monotonicity"):
            raise InvalidInput(f"unknown regularizer {self.kind!r}")
        if self.ridge < 0 or self.monotonicity < 0:
            raise InvalidInput("regularization weights must be nonnegative")

    def to_dict(self):
        return {"kind": self.kind, "ridge": self.ridge, "monotonicity": self.monotonicity}


@dataclass(frozen=True)
class VmmConfig:
    """Estimation settings.

    ``f_hidden=None`` gives the critic the model's architecture.  The
    defaults use a wider critic, which the small model needs to be held to
    its moments.  With ``optimizer="LevenbergMarquardt"`` the model learning
    rate is the initial damping.  ``early_stop_patience=0`` disables early
    stopping and returns the final iterate.
    """

    h_hidden: tuple = (3, 3)
    f_hidden: tuple | None = (30, 30)
    activation: str = "SoftPlus"
    stage1_epochs: int = 1500
    stage2_epochs: int = 1500
    critic_steps_per_model_step: int = 5
    lr_model: float = 1e-2
    lr_critic: float = 0.1
    optimizer: str = "Adam"
    momentum: float = 0.9
    regularizer: Regularizer = field(default_factory=Regularizer)
    seed: int = 0
    early_stop_patience: int = 0
    validation_fraction: float = 0.1
    critic_includes_w: bool = True
    moment_ridge: float = 1e-6
    monotonicity_probes: int = 64

    def __post_init__(self):
        object.__setattr__(self, "h_hidden", tuple(int(v) for v in self.h_hidden))
        if self.f_hidden is not None:
            object.__setattr__(self, "f_hidden", tuple(int(v) for v in self.f_hidden))
        if self.stage1_epochs < 1 or self.stage2_epochs < 0:
            raise InvalidInput("epoch counts must be positive")
        if self.critic_steps_per_model_step < 1:
            raise InvalidInput("critic_steps_per_model_step must be at least 1")
        if not (self.lr_model > 0 and self.lr_critic > 0):
            raise InvalidInput("learning rates must be positive")
        if self.optimizer not in ("Adam", "Momentum", "LevenbergMarquardt"):
            raise InvalidInput(f"unknown optimizer {self.optimizer!r}")
        if not 0 <= self.validation_fraction < 1:
            raise InvalidInput("validation_fraction must lie in [0, 1)")
        if isinstance(self.regularizer, dict):
            object.__setattr__(self, "regularizer", Regularizer(**self.regularizer))

    @property
    def critic_hidden(self) -> tuple:
        return self.h_hidden if self.f_hidden is None else self.f_hidden

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d["h_hidden"] = list(self.h_hidden)
        d["f_hidden"] = None if self.f_hidden is None else list(self.f_hidden)
        d["regularizer"] = self.regularizer.to_dict()
        return d

    @classmethod
    def from_dict(cls, d) -> "VmmConfig":
        d = dict(d)
        if "regularizer" in d and isinstance(d["regularizer"], dict):
            d["regularizer"] = Regularizer(**d["regularizer"])
        return cls(**d)


@dataclass
class SupplyFunction:
    """Fitted ``h``: callable on stacked ``(shares, D, w, H)`` like the solvers expect."""

    enc: SupplyEncoding
    spec: NetSpec
    theta: np.ndarray
    x_norm: Standardizer
    p_mean: float
    p_scale: float

    def __call__(self, shares, D, w, H):
        X = encode_batch(shares, D, w, H, self.enc)
        M, J, F = X.shape
        out = nets.forward(self.spec, self.theta, self.x_norm(X.reshape(M * J, F)))[:, 0]
        return self.p_mean + self.p_scale * out.reshape(M, J)

    def evaluate(self, X, theta=None) -> np.ndarray:
        """``h`` at already-encoded inputs (n, F)."""
        theta = self.theta if theta is None else theta
        return self.p_mean + self.p_scale * nets.forward(self.spec, theta, self.x_norm(X))[:, 0]

    def grad_theta(self, X, theta=None) -> np.ndarray:
        """Per-row gradient of ``h`` at encoded inputs w.r.t. theta, shape (n, b)."""
        theta = self.theta if theta is None else theta
        return self.p_scale * nets.jacobian_theta(self.spec, theta, self.x_norm(np.atleast_2d(X)))

    def on_dataset(self, dataset: Dataset, demand=None) -> np.ndarray:
        return self.evaluate(encode_dataset(dataset, self.enc, demand))

    def with_theta(self, theta) -> "SupplyFunction":
        return replace(self, theta=np.asarray(theta, dtype=float))


@dataclass
class EstimationResult:
    supply: SupplyFunction
    theta_hat: np.ndarray
    theta_tilde: np.ndarray
    f_spec: NetSpec
    f_params: np.ndarray
    z_norm: Standardizer
    residuals: np.ndarray
    residual_market_ids: np.ndarray
    train_mse: float
    test_mse: float | None
    trace: list
    config: VmmConfig
    critic_includes_w: bool = True

    def residuals_for(self, dataset: Dataset, demand=None) -> np.ndarray:
        """``p - h`` on any dataset (pre-merger ownership)."""
        return dataset.prices - self.supply.on_dataset(dataset, demand)


# ---------------------------------------------------------------------------
# objective


@dataclass(frozen=True)
class VmmBatch:
    """Training batch on the normalized scale.

    ``X`` are standardized supply inputs, ``Z`` standardized critic inputs,
    ``p`` standardized prices.
    """

    h_spec: NetSpec
    f_spec: NetSpec
    X: np.ndarray
    Z: np.ndarray
    p: np.ndarray

    def __post_init__(self):
        if self.X.shape[0] == 0:
            raise InvalidInput("empty batch")


def vmm_objective(theta, f_params, theta_tilde, batch: VmmBatch, reg: float = 0.0) -> float:
    """``mean(f * omega(theta)) - mean((f * omega(theta_tilde))**2) / 4 - reg``."""
    f = nets.forward(batch.f_spec, f_params, batch.Z)[:, 0]
    om = batch.p - nets.forward(batch.h_spec, theta, batch.X)[:, 0]
    om_t = batch.p - nets.forward(batch.h_spec, theta_tilde, batch.X)[:, 0]
    return float(np.mean(f * om) - 0.25 * np.mean((f * om_t) ** 2) - reg)


def _trunc_spec(f_spec: NetSpec):
    if not f_spec.hidden_layers:
        return None
    return NetSpec(f_spec.input_dim, f_spec.hidden_layers[:-1], f_spec.hidden_layers[-1], f_spec.activation)


class _Critic:
    """Critic whose last affine layer is profiled out."""

    def __init__(self, f_spec: NetSpec, Z, moment_ridge):
        self.spec = f_spec
        self.trunc = _trunc_spec(f_spec)
        self.Z = Z
        self.ridge = moment_ridge
        self.last = nets.last_layer_slice(f_spec)

    def hidden(self, psi):
        return psi[: self.last.start]

    def features(self, psi, Z=None):
        Z = self.Z if Z is None else Z
        if self.trunc is None:
            F = Z
        else:
            F = nets.hidden_features(self.spec, psi, Z)
        return np.column_stack([F, np.ones(F.shape[0])])

    def profile(self, Phi, omega, v):
        """Return ``(value, a)`` with ``a = S^{-1} g`` (half the optimal last layer)."""
        n = Phi.shape[0]
        g = Phi.T @ omega / n
        S = (Phi * v[:, None]).T @ Phi / n
        S = S + self.ridge * (np.trace(S) / S.shape[0] + 1e-300) * np.eye(S.shape[0])
        a = np.linalg.solve(S, g)
        return float(g @ a), a

    def value(self, psi, omega, v):
        return self.profile(self.features(psi), omega, v)[0]

    def grad_hidden(self, psi, omega, v):
        """Gradient of the profiled value w.r.t. the hidden-layer parameters."""
        Phi = self.features(psi)
        n = Phi.shape[0]
        val, a = self.profile(Phi, omega, v)
        dPhi = (2.0 / n) * np.outer(omega - v * (Phi @ a), a)[:, :-1]
        hid = self.hidden(psi)
        pre = nets.forward(self.trunc, hid, self.Z)
        cot = dPhi * nets._act_grad(self.spec.activation, pre)
        return val, nets.grad_theta(self.trunc, hid, self.Z, cot)

    def set_last(self, psi, a):
        psi = psi.copy()
        k = a.size - 1
        # f = Phi @ (2a): weights then bias, matching the flat layout
        psi[self.last] = np.concatenate([2.0 * a[:k], [2.0 * a[k]]])
        return psi

    def ascend(self, psi, omega, v, lr, steps):
        """Backtracking gradient ascent; the profiled value never decreases."""
        vals = [self.value(psi, omega, v)]
        if self.trunc is None:
            return psi, vals
        for _ in range(steps):
            val, g = self.grad_hidden(psi, omega, v)
            gn = np.linalg.norm(g)
            if not np.isfinite(gn) or gn == 0:
                break
            step = lr
            for _ in range(20):
                cand = psi.copy()
                cand[: self.last.start] += step * g
                cv = self.value(cand, omega, v)
                if np.isfinite(cv) and cv >= val:
                    psi = cand
                    val = cv
                    break
                step *= 0.5
            vals.append(val)
        return psi, vals


class _Adam:
    def __init__(self, lr, b1=0.9, b2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = self.v = None
        self.t = 0

    def step(self, x, g):
        if self.m is None:
            self.m = np.zeros_like(x)
            self.v = np.zeros_like(x)
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * g
        self.v = self.b2 * self.v + (1 - self.b2) * g * g
        mh = self.m / (1 - self.b1**self.t)
        vh = self.v / (1 - self.b2**self.t)
        return x - self.lr * mh / (np.sqrt(vh) + self.eps)


class _Momentum:
    def __init__(self, lr, beta):
        self.lr, self.beta = lr, beta
        self.u = None

    def step(self, x, g):
        self.u = g if self.u is None else self.beta * self.u + g
        return x - self.lr * self.u


# ---------------------------------------------------------------------------
# monotonicity


def monotonicity_penalty(h, probes) -> float:
    """Sum of squared positive first differences of ``h`` along the probe.

    ``probes`` is (n, F) with rows ordered by the own-derivative slot;
    ``h`` maps (n, F) to n values.  Several probe lines can be passed as a
    (lines, n, F) array together with ``slot``-sorted rows.
    """
    P = np.asarray(probes, dtype=float)
    vals = np.asarray(h(P.reshape(-1, P.shape[-1])), dtype=float).reshape(P.shape[:-1])
    diff = np.diff(vals, axis=-1)
    return float(np.sum(np.maximum(diff, 0.0) ** 2))


def check_probe(probes, slot) -> None:
    P = np.asarray(probes, dtype=float)
    if P.ndim < 2:
        raise InvalidInput("probe must be a 2-d array of inputs")
    key = P[..., slot]
    if np.any(np.diff(key, axis=-1) < 0):
        raise InvalidInput("probe inputs must be sorted increasing in the own-derivative slot")
    others = np.delete(P, slot, axis=-1)
    if np.any(np.abs(others - others[..., :1, :]) > 0):
        raise InvalidInput("probe inputs may differ only in the own-derivative slot")


def own_derivative_slot(enc: SupplyEncoding) -> int:
    if not enc.include_derivatives:
        raise InvalidInput("encoding has no derivative block")
    return enc.max_products


def make_probes(X, enc: SupplyEncoding, n_lines, n_points, rng) -> np.ndarray:
    """Probe lines through random rows of ``X`` spanning the observed own-derivative range."""
    slot = own_derivative_slot(enc)
    rows = X[rng.choice(X.shape[0], size=min(n_lines, X.shape[0]), replace=False)]
    grid = np.linspace(X[:, slot].min(), X[:, slot].max(), n_points)
    P = np.repeat(rows[:, None, :], n_points, axis=1)
    P[:, :, slot] = grid
    return P


def _mono_grad(spec, theta, Pn, lam):
    """Value and theta-gradient of ``lam * R^M`` on normalized probe lines."""
    L, n, F = Pn.shape
    flat = Pn.reshape(L * n, F)
    vals = nets.forward(spec, theta, flat)[:, 0].reshape(L, n)
    pos = np.maximum(np.diff(vals, axis=1), 0.0)
    val = lam * float(np.sum(pos**2))
    if val == 0.0:
        return 0.0, np.zeros_like(theta)
    cot = np.zeros((L, n))
    cot[:, 1:] += 2 * lam * pos
    cot[:, :-1] -= 2 * lam * pos
    return val, nets.grad_theta(spec, theta, flat, cot.reshape(-1, 1))


# ---------------------------------------------------------------------------
# fitting


def _validation_split(dataset: Dataset, fraction, seed):
    T = len(dataset)
    if fraction == 0 or T < 4:
        return np.ones(T, dtype=bool)
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), 0xA11])))
    n_val = max(1, int(round(fraction * T)))
    keep = np.ones(T, dtype=bool)
    keep[rng.permutation(T)[:n_val]] = False
    return keep


@dataclass
class _Problem:
    h_spec: NetSpec
    critic: _Critic
    X: np.ndarray
    p: np.ndarray
    Xv: np.ndarray | None
    Zv: np.ndarray | None
    pv: np.ndarray | None
    probes: np.ndarray | None


def _model_penalty(prob, theta, reg: Regularizer):
    val, grad = 0.0, np.zeros_like(theta)
    if reg.ridge > 0:
        val += reg.ridge * float(theta @ theta)
        grad += 2 * reg.ridge * theta
    if reg.monotonicity > 0 and prob.probes is not None:
        v, g = _mono_grad(prob.h_spec, theta, prob.probes, reg.monotonicity)
        val += v
        grad += g
    return val, grad


def _lm_step(prob, theta, Phi, v, omega, lam, reg):
    n = Phi.shape[0]
    Jh = nets.jacobian_theta(prob.h_spec, theta, prob.X)
    A = Phi.T @ Jh / n
    g = Phi.T @ omega / n
    S = (Phi * v[:, None]).T @ Phi / n
    S = S + prob.critic.ridge * (np.trace(S) / S.shape[0]) * np.eye(S.shape[0])
    k, b = A.shape
    if b <= k:
        # primal form; same step as the dual below whenever lam > 0
        SiA = np.linalg.solve(S, A)
        return theta + np.linalg.solve(A.T @ SiA + lam * np.eye(b), SiA.T @ g)
    return theta + A.T @ np.linalg.solve(A @ A.T + lam * S, g)


def _minmax(prob, theta, psi, weights, epochs, cfg: VmmConfig, stage, trace):
    """Alternate critic ascent and model descent; ``weights`` is ``(v_fit, v_val)``."""
    v, v_val = weights
    crit = prob.critic
    reg = cfg.regularizer
    if cfg.optimizer == "Adam":
        opt = _Adam(cfg.lr_model)
    elif cfg.optimizer == "Momentum":
        opt = _Momentum(cfg.lr_model, cfg.momentum)
    else:
        opt = None
    lam = cfg.lr_model if opt is None else 0.0
    best = (np.inf, theta.copy(), psi.copy())
    stall = 0
    for epoch in range(epochs):
        omega = prob.p - nets.forward(prob.h_spec, theta, prob.X)[:, 0]
        psi, vals = crit.ascend(psi, omega, v, cfg.lr_critic, cfg.critic_steps_per_model_step)
        Phi = crit.features(psi)
        val, a = crit.profile(Phi, omega, v)
        psi = crit.set_last(psi, a)
        pen, pen_grad = _model_penalty(prob, theta, reg)
        if opt is None:
            theta_new = _lm_step(prob, theta, Phi, v, omega, lam, reg)
            om_new = prob.p - nets.forward(prob.h_spec, theta_new, prob.X)[:, 0]
            new_val = crit.profile(Phi, om_new, v)[0] + _model_penalty(prob, theta_new, reg)[0]
            if np.isfinite(new_val) and new_val < val + pen:
                theta = theta_new
                lam = max(lam / 3.0, 1e-10)
            else:
                lam = min(lam * 4.0, 1e10)
        else:
            f = Phi @ (2.0 * a)
            grad = -nets.grad_theta(prob.h_spec, theta, prob.X, (f / f.size)[:, None]) + pen_grad
            theta = opt.step(theta, grad)
        rec = {"stage": stage, "epoch": epoch, "objective": val + pen, "critic_gain": vals[-1] - vals[0]}
        if prob.Xv is not None:
            om_v = prob.pv - nets.forward(prob.h_spec, theta, prob.Xv)[:, 0]
            Phi_v = crit.features(psi, prob.Zv)
            rec["validation"] = crit.profile(Phi_v, om_v, v_val)[0]
            rec["validation_mse"] = float(np.mean(om_v**2))
        trace.append(rec)
        if not (np.isfinite(rec["objective"]) and np.all(np.isfinite(theta))):
            raise TrainingDiverged(f"objective became non-finite in stage {stage}, epoch {epoch}", trace)
        score = rec.get("validation", rec["objective"])
        if score < best[0] - 1e-12:
            best = (score, theta.copy(), psi.copy())
            stall = 0
        else:
            stall += 1
            if cfg.early_stop_patience and stall >= cfg.early_stop_patience:
                # stopped early: fall back to the best validated iterate
                return best[1], best[2]
    return theta, psi


@dataclass
class ArrayFit:
    """Output of :func:`fit_arrays`; parameters live in standardized units."""

    h_spec: NetSpec
    f_spec: NetSpec
    theta_hat: np.ndarray
    theta_tilde: np.ndarray
    psi: np.ndarray
    x_norm: Standardizer
    z_norm: Standardizer
    p_mean: float
    p_scale: float
    trace: list

    def predict(self, X_raw, theta=None) -> np.ndarray:
        th = self.theta_hat if theta is None else theta
        return self.p_mean + self.p_scale * nets.forward(self.h_spec, th, self.x_norm(X_raw))[:, 0]


def fit_arrays(X_raw, Z_raw, p, cfg: VmmConfig = VmmConfig(), validation=None, probes_raw=None) -> ArrayFit:
    """Two-stage VMM of ``p = h(X) + omega`` against critics of ``Z``.

    ``validation`` is an optional ``(X, Z, p)`` triple used for the
    validation objective.  ``probes_raw`` are monotonicity probe points in
    raw feature units.
    """
    X_raw = np.asarray(X_raw, dtype=float)
    Z_raw = np.asarray(Z_raw, dtype=float)
    p = np.asarray(p, dtype=float)
    if X_raw.ndim != 2 or Z_raw.ndim != 2 or p.shape != (X_raw.shape[0],) or Z_raw.shape[0] != p.size:
        raise InvalidInput("X, Z and p must have matching rows")
    x_norm = Standardizer.fit(X_raw)
    z_norm = Standardizer.fit(Z_raw)
    p_mean = float(p.mean())
    p_scale = float(p.std()) or 1.0
    pn = (p - p_mean) / p_scale

    seeds = np.random.SeedSequence(cfg.seed).spawn(2)
    h_spec = NetSpec(X_raw.shape[1], cfg.h_hidden, 1, cfg.activation, int(seeds[0].generate_state(1)[0]))
    f_spec = NetSpec(Z_raw.shape[1], cfg.critic_hidden, 1, cfg.activation, int(seeds[1].generate_state(1)[0]))
    theta = nets.init(h_spec)
    psi = nets.init(f_spec)
    critic = _Critic(f_spec, z_norm(Z_raw), cfg.moment_ridge)

    Xv = Zv = pv = None
    if validation is not None:
        Xv, Zv, pv = x_norm(validation[0]), z_norm(validation[1]), (np.asarray(validation[2]) - p_mean) / p_scale
    probes = None if probes_raw is None else x_norm(probes_raw)
    prob = _Problem(h_spec, critic, x_norm(X_raw), pn, Xv, Zv, pv, probes)

    trace: list = []
    stage1 = (np.ones_like(pn), None if pv is None else np.ones_like(pv))
    theta_tilde, psi = _minmax(prob, theta, psi, stage1, cfg.stage1_epochs, cfg, 1, trace)
    theta_hat = theta_tilde
    if cfg.stage2_epochs > 0:
        sq = lambda X, y: np.maximum((y - nets.forward(h_spec, theta_tilde, X)[:, 0]) ** 2, 1e-8)
        stage2 = (sq(prob.X, pn), None if pv is None else sq(Xv, pv))
        theta_hat, psi = _minmax(prob, theta_tilde.copy(), psi, stage2, cfg.stage2_epochs, cfg, 2, trace)
    return ArrayFit(h_spec, f_spec, theta_hat, theta_tilde, psi, x_norm, z_norm, p_mean, p_scale, trace)


def fit(dataset: Dataset, cfg: VmmConfig = VmmConfig(), enc: SupplyEncoding = SupplyEncoding(), demand=None) -> EstimationResult:
    """Two-stage VMM on the training markets of ``dataset``.

    Markets without a split label are all treated as training data.  A
    ``validation_fraction`` of training markets is held back for the
    validation objective; the final residuals cover every training market.
    """
    demand = demand or dataset.demand
    train = dataset.split_subset(TRAIN) if dataset.split_labels is not None else dataset
    if len(train) == 0:
        raise InvalidInput("training split is empty")
    test = dataset.split_subset("Test") if dataset.split_labels is not None else None
    if test is not None and len(test) == 0:
        test = None

    keep = _validation_split(train, cfg.validation_fraction, cfg.seed)
    fit_set = train.subset(keep)
    val_set = train.subset(~keep) if (~keep).any() else None

    X_raw = encode_dataset(fit_set, enc, demand)
    Z_raw = critic_inputs(fit_set, cfg.critic_includes_w)
    validation = None
    if val_set is not None:
        validation = (encode_dataset(val_set, enc, demand), critic_inputs(val_set, cfg.critic_includes_w), val_set.prices)
    probes = None
    if cfg.regularizer.monotonicity > 0:
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([cfg.seed, 0x9B0])))
        probes = make_probes(X_raw, enc, cfg.monotonicity_probes, 16, rng)
    af = fit_arrays(X_raw, Z_raw, fit_set.prices, cfg, validation, probes)

    supply = SupplyFunction(enc, af.h_spec, af.theta_hat, af.x_norm, af.p_mean, af.p_scale)
    resid = train.prices - supply.on_dataset(train, demand)
    test_mse = None
    if test is not None:
        test_mse = float(np.mean((test.prices - supply.on_dataset(test, demand)) ** 2))
    return EstimationResult(
        supply, af.theta_hat, af.theta_tilde, af.f_spec, af.psi, af.z_norm, resid, train.product_market_ids,
        float(np.mean(resid**2)), test_mse, af.trace, cfg, cfg.critic_includes_w,
    )


# ---------------------------------------------------------------------------
# persistence


def save_result(result: EstimationResult, directory) -> None:
    """Two checkpoints, a residual CSV and a JSON training log."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    s = result.supply
    extra = {
        "encoding": s.enc.to_dict(),
        "x_norm": s.x_norm.to_dict(),
        "p_mean": s.p_mean,
        "p_scale": s.p_scale,
    }
    nets.save_checkpoint(directory / "h.ckpt", s.spec, result.theta_hat, extra)
    nets.save_checkpoint(directory / "h_stage1.ckpt", s.spec, result.theta_tilde)
    nets.save_checkpoint(
        directory / "f.ckpt", result.f_spec, result.f_params,
        {"z_norm": result.z_norm.to_dict(), "includes_w": result.critic_includes_w},
    )
    lines = ["market_id,obs,residual"]
    lines += [f"{int(m)},{i},{float(r)!r}" for i, (m, r) in enumerate(zip(result.residual_market_ids, result.residuals))]
    (directory / "residuals.csv").write_text("\n".join(lines) + "\n")
    log = {
        "config": result.config.to_dict(),
        "train_mse": result.train_mse,
        "test_mse": result.test_mse,
        "trace": result.trace,
    }
    (directory / "training_log.json").write_text(json.dumps(log, indent=1, sort_keys=True) + "\n")


def load_supply(directory) -> SupplyFunction:
    spec, theta, extra = nets.load_checkpoint(Path(directory) / "h.ckpt")
    enc = SupplyEncoding(**extra["encoding"])
    return SupplyFunction(enc, spec, theta, Standardizer.from_dict(extra["x_norm"]), extra["p_mean"], extra["p_scale"])


def load_result(directory) -> EstimationResult:
    directory = Path(directory)
    supply = load_supply(directory)
    _, theta_tilde, _ = nets.load_checkpoint(directory / "h_stage1.ckpt")
    f_spec, f_params, fx = nets.load_checkpoint(directory / "f.ckpt")
    rows = (directory / "residuals.csv").read_text().splitlines()[1:]
    mids = np.array([int(r.split(",")[0]) for r in rows], dtype=np.int64)
    resid = np.array([float(r.split(",")[2]) for r in rows])
    log = json.loads((directory / "training_log.json").read_text())
    return EstimationResult(
        supply, supply.theta, theta_tilde, f_spec, f_params, Standardizer.from_dict(fx["z_norm"]),
        resid, mids, log["train_mse"], log["test_mse"], log["trace"], VmmConfig.from_dict(log["config"]),
        fx.get("includes_w", True),
    )
