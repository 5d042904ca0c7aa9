"""Pre-merger and counterfactual price equilibria.

Two residual maps are solved here:

* structural: ``p - c - markup(p)`` with the stacked-FOC markup under a
  conduct matrix, and
* flexible: ``p - h(s(p), D(p), w; H) - omega_hat`` for an estimated supply
  function ``h``.

Supply functions are any callable ``h(shares, D, w, H)`` that maps stacked
arrays for markets with a common product count ``J`` -- shapes (M, J),
(M, J, J), (M, J, K_w), (M, J, J) -- to an (M, J) array of supply values.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import InvalidInput, NonConvergence, SingularMarkupSystem
from .kernels import Layout
from .market_model import ConductSpec, DemandSpec


class SolverMethod(str, enum.Enum):
    ZETA = "ZetaFixedPoint"
    NEWTON = "NewtonRoot"
    HYBRID = "Hybrid"


_METHOD_CODE = {SolverMethod.ZETA: kernels.ZETA, SolverMethod.NEWTON: kernels.NEWTON, SolverMethod.HYBRID: kernels.HYBRID}


@dataclass(frozen=True)
class SolverConfig:
    tol: float = 1e-6
    max_iter: int = 1000
    damping: float = 1.0
    method: SolverMethod = SolverMethod.HYBRID

    def __post_init__(self):
        object.__setattr__(self, "method", SolverMethod(self.method))
        if not self.tol > 0:
            raise InvalidInput("tol must be positive")
        if self.max_iter < 1:
            raise InvalidInput("max_iter must be at least 1")
        if not 0 < self.damping <= 1:
            raise InvalidInput("damping must lie in (0, 1]")

    def with_method(self, method) -> "SolverConfig":
        return SolverConfig(self.tol, self.max_iter, self.damping, SolverMethod(method))


@dataclass(frozen=True)
class EquilibriumResult:
    prices: np.ndarray
    shares: np.ndarray
    iterations: int
    residual_norm: float
    converged: bool


@dataclass(frozen=True)
class BatchEquilibrium:
    """Ragged batch of equilibria; per-market arrays are indexed by position."""

    layout: Layout
    prices: np.ndarray
    shares: np.ndarray
    iterations: np.ndarray
    residual_norms: np.ndarray
    status: np.ndarray

    @property
    def converged(self) -> np.ndarray:
        return self.status == kernels.OK

    @property
    def failed(self) -> np.ndarray:
        return np.flatnonzero(self.status != kernels.OK)

    def market(self, t) -> EquilibriumResult:
        sl = slice(self.layout.offsets[t], self.layout.offsets[t + 1])
        return EquilibriumResult(
            self.prices[sl].copy(),
            self.shares[sl].copy(),
            int(self.iterations[t]),
            float(self.residual_norms[t]),
            bool(self.status[t] == kernels.OK),
        )

    def raise_for_status(self, market_ids=None):
        bad = self.failed
        if bad.size == 0:
            return
        ids = bad if market_ids is None else np.asarray(market_ids)[bad]
        if np.any(self.status[bad] == kernels.SINGULAR):
            raise SingularMarkupSystem(f"{np.sum(self.status == kernels.SINGULAR)} singular market(s)", int(ids[0]))
        raise NonConvergence(
            f"{bad.size} market(s) did not converge, worst residual {np.nanmax(self.residual_norms[bad]):.3g}",
            residual=float(np.nanmax(self.residual_norms[bad])),
            markets=[int(i) for i in ids],
        )


def _shares_flat(layout, delta):
    out = np.empty_like(delta)
    for J, _, pidx in layout.groups():
        out[pidx] = kernels._np_shares(delta[pidx])
    return out


def solve_structural_batch(
    demand: DemandSpec,
    layout: Layout,
    delta0,
    cost,
    h_flat,
    cfg: SolverConfig = SolverConfig(),
    p0=None,
    conduct: ConductSpec | None = None,
    backend=None,
) -> BatchEquilibrium:
    """Structural equilibria for a ragged batch of markets.

    ``delta0`` is the price-free mean utility (``x @ beta + xi``) per
    product.  Starting prices default to the cost vector.
    """
    cost = np.asarray(cost, dtype=float)
    if not np.all(np.isfinite(cost)):
        raise InvalidInput("costs must be finite")
    p0 = cost.copy() if p0 is None else np.asarray(p0, dtype=float)
    zero = conduct is not None and conduct.zero_markup
    prices, iters, resid, status = kernels.solve_structural_flat(
        delta0, demand.alpha, cost, h_flat, layout.offsets, p0,
        zero_markup=zero, tol=cfg.tol, max_iter=cfg.max_iter, damping=cfg.damping,
        method=_METHOD_CODE[cfg.method], backend=backend,
    )
    shares = _shares_flat(layout, np.asarray(delta0) + demand.alpha * prices)
    return BatchEquilibrium(layout, prices, shares, iters, resid, status)


def solve_structural(demand, x, xi, cost, H, cfg: SolverConfig = SolverConfig(), p0=None, conduct=None, backend=None) -> EquilibriumResult:
    """Solve ``p = c + (-H * D(p)')^{-1} s(p)`` in one market."""
    cost = np.atleast_1d(np.asarray(cost, dtype=float))
    H = np.asarray(H, dtype=float)
    if H.shape != (cost.size, cost.size):
        raise InvalidInput(f"ownership shape {H.shape} does not match {cost.size} products")
    layout = Layout.from_sizes([cost.size])
    res = solve_structural_batch(
        demand, layout, demand.mean_utility(x, xi), cost, H.ravel(), cfg,
        p0=None if p0 is None else np.atleast_1d(p0), conduct=conduct, backend=backend,
    )
    res.raise_for_status()
    return res.market(0)


# ---------------------------------------------------------------------------
# flexible supply


def _flex_residual(h, demand, delta0, omega_hat, w, H, p):
    s = kernels._np_shares(delta0 + demand.alpha * p)
    D = demand.alpha * (s[..., :, None] * np.eye(s.shape[-1]) - s[..., :, None] * s[..., None, :])
    return p - np.asarray(h(s, D, w, H), dtype=float) - omega_hat


def _solve_flexible_group(h, demand, delta0, omega_hat, w, H, p0, cfg):
    M, J = delta0.shape
    p = p0.copy()
    iters = np.zeros(M, dtype=np.int64)
    status = np.full(M, kernels.NOT_CONVERGED, dtype=np.int64)
    method = cfg.method

    def resid(idx, pp):
        return _flex_residual(h, demand, delta0[idx], omega_hat[idx], w[idx], H[idx], pp)

    with np.errstate(all="ignore"):
        r = resid(slice(None), p)
        rn = np.abs(r).max(axis=1)
        active = ~(rn <= cfg.tol)
        status[~active] = kernels.OK
        for it in range(1, cfg.max_iter + 1):
            if not active.any():
                break
            a = np.flatnonzero(active)
            pa, ra = p[a], r[a]
            if method is SolverMethod.ZETA or (method is SolverMethod.HYBRID and it <= kernels.HYBRID_WARMUP):
                pn = pa - cfg.damping * ra
            else:
                step = 1e-5 * (1.0 + np.abs(pa))
                Jac = np.empty((a.size, J, J))
                for k in range(J):
                    e = np.zeros(J)
                    e[k] = 1.0
                    hk = step[:, k : k + 1]
                    Jac[:, :, k] = (resid(a, pa + hk * e) - resid(a, pa - hk * e)) / (2.0 * hk)
                dp = -np.linalg.solve(Jac, ra[..., None])[..., 0]
                base = np.abs(ra).max(axis=1)
                t = np.ones(a.size)
                pn = pa + dp
                rna = np.abs(resid(a, pn)).max(axis=1)
                for _ in range(30):
                    bad = ~(rna < base) & (t > 1e-6)
                    if not bad.any():
                        break
                    t[bad] *= 0.5
                    pn[bad] = pa[bad] + t[bad, None] * dp[bad]
                    rna[bad] = np.abs(resid(a[bad], pn[bad])).max(axis=1)
            p[a] = pn
            iters[a] = it
            r[a] = resid(a, pn)
            rn[a] = np.abs(r[a]).max(axis=1)
            done = rn[a] <= cfg.tol
            status[a[done]] = kernels.OK
            active[a[done]] = False
    status[~np.isfinite(rn)] = kernels.NOT_CONVERGED
    return p, iters, rn, status


def solve_flexible_batch(
    h, demand: DemandSpec, layout: Layout, delta0, omega_hat, w, h_flat, cfg: SolverConfig = SolverConfig(), p0=None
) -> BatchEquilibrium:
    """Roots of ``p - h(s(p), D(p), w; H) - omega_hat`` for a ragged batch."""
    delta0 = np.asarray(delta0, dtype=float)
    omega_hat = np.asarray(omega_hat, dtype=float)
    w = np.asarray(w, dtype=float)
    if p0 is None:
        raise InvalidInput("flexible solves need starting prices")
    p0 = np.asarray(p0, dtype=float)
    T = layout.n_markets
    prices = np.empty_like(p0)
    iters = np.zeros(T, dtype=np.int64)
    resid = np.zeros(T)
    status = np.zeros(T, dtype=np.int64)
    for J, midx, pidx in layout.groups():
        H = layout.stack_h(h_flat, midx, J)
        p, it, rn, st = _solve_flexible_group(h, demand, delta0[pidx], omega_hat[pidx], w[pidx], H, p0[pidx], cfg)
        prices[pidx] = p
        iters[midx], resid[midx], status[midx] = it, rn, st
    shares = _shares_flat(layout, delta0 + demand.alpha * prices)
    return BatchEquilibrium(layout, prices, shares, iters, resid, status)


def solve_flexible(h, demand, x, xi, omega_hat, w, H, cfg: SolverConfig = SolverConfig(), p0=None) -> EquilibriumResult:
    """Solve the flexible-supply root problem in one market.

    Starts from ``p0`` when given, otherwise from ``h`` evaluated at the
    outside-good limit plus ``omega_hat``.
    """
    omega_hat = np.atleast_1d(np.asarray(omega_hat, dtype=float))
    J = omega_hat.size
    H = np.asarray(H, dtype=float)
    w = np.asarray(w, dtype=float).reshape(J, -1)
    delta0 = demand.mean_utility(x, xi)
    if p0 is None:
        s = demand.shares(np.zeros(J), x, xi)
        p0 = np.asarray(h(s[None], demand.derivatives(s)[None], w[None], H[None]), dtype=float)[0] + omega_hat
    layout = Layout.from_sizes([J])
    res = solve_flexible_batch(h, demand, layout, delta0, omega_hat, w, H.ravel(), cfg, p0=np.atleast_1d(p0))
    res.raise_for_status()
    return res.market(0)


def structural_supply(gamma, conduct: ConductSpec):
    """Supply function ``w @ gamma + markup`` of a conduct model.

    Useful as a plug-in ``h`` for :func:`solve_flexible`; with
    ``omega_hat = omega`` the flexible root equals the structural
    equilibrium.  The conduct matrix passed at evaluation time is used.
    """
    gamma = np.asarray(gamma, dtype=float)

    def h(shares, D, w, H):
        if conduct.zero_markup:
            return w @ gamma
        A = -H * np.swapaxes(D, -1, -2)
        return w @ gamma + np.linalg.solve(A, shares[..., None])[..., 0]

    return h
