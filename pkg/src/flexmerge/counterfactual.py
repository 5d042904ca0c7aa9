"""Merger counterfactuals with a fitted supply function, pass-through and error reports."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .datagen import Dataset
from .equilibrium import BatchEquilibrium, SolverConfig, solve_flexible_batch, solve_structural_batch
from .errors import InvalidInput, NonConvergence
from .kernels import Layout
from .market_model import ConductSpec, DemandSpec, MarketData
from .toolkit import owners_from_ownership


def flexible_shocks(dataset: Dataset, supply, demand: DemandSpec | None = None) -> np.ndarray:
    """``omega_hat = p - h`` at observed pre-merger data."""
    return dataset.prices - supply.on_dataset(dataset, demand)


def predict_merger_flexible(
    merged: Dataset,
    supply,
    omega_hat,
    demand: DemandSpec | None = None,
    cfg: SolverConfig = SolverConfig(),
) -> BatchEquilibrium:
    """Roots of ``p - h(s(p), D(p), w; H_post) - omega_hat`` per market.

    ``merged`` holds post-merger ownership and pre-merger prices, which are
    the starting point.  ``omega_hat`` are the pre-merger implied shocks
    (:func:`flexible_shocks` on the pre-merger data), held fixed.
    """
    demand = demand or merged.demand
    omega_hat = np.asarray(omega_hat, dtype=float)
    if omega_hat.shape != (merged.layout.n_products,):
        raise InvalidInput("omega_hat does not align with the merged dataset")
    return solve_flexible_batch(
        supply, demand, merged.layout, merged.delta0(demand), omega_hat, merged.w, merged.h_flat, cfg, p0=merged.prices
    )


# ---------------------------------------------------------------------------
# pass-through


@dataclass(frozen=True)
class StructuralModel:
    """Conduct-model pricing with known costs ``cost`` for one market."""

    conduct: ConductSpec
    cost: np.ndarray

    def solve(self, market: MarketData, demand, extra_cost, cfg):
        c = np.asarray(self.cost, dtype=float) + extra_cost
        layout = Layout.from_sizes([market.J])
        H = self.conduct.ownership(owners_from_ownership(market.ownership))
        return solve_structural_batch(
            demand, layout, demand.mean_utility(market.x, market.xi), c, H.ravel(), cfg,
            p0=market.prices, conduct=self.conduct,
        )


@dataclass(frozen=True)
class FlexibleModel:
    """Fitted supply function with its implied shocks for one market."""

    supply: object
    omega_hat: np.ndarray

    def solve(self, market: MarketData, demand, extra_cost, cfg):
        layout = Layout.from_sizes([market.J])
        return solve_flexible_batch(
            self.supply, demand, layout, demand.mean_utility(market.x, market.xi),
            np.asarray(self.omega_hat) + extra_cost, market.w, market.ownership.ravel(), cfg, p0=market.prices,
        )


def passthrough_matrix(
    market: MarketData,
    model,
    shock_fraction: float = 0.10,
    demand: DemandSpec | None = None,
    cfg: SolverConfig = SolverConfig(),
    cost_base=None,
) -> np.ndarray:
    """Entry ``(j, k)``: equilibrium change in ``p_j`` per unit rise in product ``k``'s cost.

    Product ``k``'s cost rises by ``shock_fraction * cost_base[k]``, loaded on
    the model's shock.  ``cost_base`` defaults to the structural model's
    cost and is required for flexible models.
    """
    demand = demand or DemandSpec()
    if cost_base is None:
        if not isinstance(model, StructuralModel):
            raise InvalidInput("flexible pass-through needs cost_base")
        cost_base = model.cost
    cost_base = np.asarray(cost_base, dtype=float)
    if not shock_fraction > 0:
        raise InvalidInput("shock_fraction must be positive")
    J = market.J
    base = model.solve(market, demand, np.zeros(J), cfg)
    base.raise_for_status([market.market_id])
    out = np.empty((J, J))
    for k in range(J):
        dc = np.zeros(J)
        dc[k] = shock_fraction * cost_base[k]
        res = model.solve(market, demand, dc, cfg)
        res.raise_for_status([market.market_id])
        out[:, k] = (res.prices - base.prices) / dc[k]
    return out


def median_share_market(merged: Dataset, post_shares) -> int:
    """Position of the affected market with the median post-merger inside share."""
    if merged.affected is None or not any(merged.affected):
        raise InvalidInput("dataset has no merger-affected markets")
    post_shares = np.asarray(post_shares, dtype=float)
    idx = np.flatnonzero(merged.affected)
    totals = np.add.reduceat(post_shares, merged.layout.offsets[:-1])[idx]
    order = np.argsort(totals, kind="stable")
    return int(idx[order[(len(order) - 1) // 2]])


# ---------------------------------------------------------------------------
# error reporting


@dataclass(frozen=True)
class PredictionReport:
    mse: float
    n: int
    quantiles: dict
    per_market: dict

    def as_row(self) -> dict:
        return {"mse": self.mse, "n": self.n, **{f"pct_q{int(q * 100):02d}": v for q, v in self.quantiles.items()}}


QUANTILES = (0.05, 0.25, 0.5, 0.75, 0.95)


def prediction_error_report(predicted, truth, weights=None, market_ids=None, mask=None) -> PredictionReport:
    """MSE and percent-error quantiles of predicted against true prices.

    ``mask`` restricts the report to selected products (e.g. markets
    where the merging firms are present).  Percent errors are
    ``100 * (predicted - truth) / truth``.
    """
    pred = np.asarray(predicted, dtype=float)
    true = np.asarray(truth, dtype=float)
    if pred.shape != true.shape or pred.ndim != 1:
        raise InvalidInput("predicted and true prices must be aligned vectors")
    sel = np.ones(pred.size, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if sel.shape != pred.shape:
        raise InvalidInput("mask does not align with prices")
    if not sel.any():
        raise InvalidInput("no products selected")
    err = pred[sel] - true[sel]
    if weights is None:
        mse = float(np.mean(err**2))
    else:
        wts = np.asarray(weights, dtype=float)
        if wts.shape != pred.shape:
            raise InvalidInput("weights do not align with prices")
        mse = float(np.sum(wts[sel] * err**2) / np.sum(wts[sel]))
    pct = 100.0 * err / true[sel]
    quants = {q: float(np.quantile(pct, q)) for q in QUANTILES}
    per_market = {}
    if market_ids is not None:
        ids = np.asarray(market_ids)[sel]
        for mid in np.unique(ids):
            per_market[int(mid)] = float(np.mean(err[ids == mid] ** 2))
    return PredictionReport(mse, int(sel.sum()), quants, per_market)


PREDICTION_COLUMNS = ("market_id", "firm_id", "pre_price", "predicted_price", "true_post_price", "model")


def write_predictions(path, merged: Dataset, predictions: dict, truth=None, mask=None) -> None:
    """Long-format prediction CSV, one row per product and model label."""
    sel = np.ones(merged.layout.n_products, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    mids = merged.product_market_ids
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(PREDICTION_COLUMNS)
        for label, prices in predictions.items():
            for i in np.flatnonzero(sel):
                t = "" if truth is None else repr(float(truth[i]))
                wr.writerow([int(mids[i]), int(merged.firm_ids[i]), repr(float(merged.prices[i])), repr(float(prices[i])), t, label])


def read_predictions(path) -> dict:
    """``{model: (market_ids, predicted, true)}`` from a prediction CSV."""
    out: dict = {}
    with open(Path(path)) as fh:
        for r in csv.DictReader(fh):
            d = out.setdefault(r["model"], ([], [], []))
            d[0].append(int(r["market_id"]))
            d[1].append(float(r["predicted_price"]))
            d[2].append(float(r["true_post_price"]) if r["true_post_price"] else np.nan)
    return {k: tuple(np.array(v) for v in vals) for k, vals in out.items()}


def require_converged(eq: BatchEquilibrium, market_ids) -> None:
    if eq.failed.size:
        raise NonConvergence(
            f"{eq.failed.size} market(s) did not converge",
            residual=float(np.nanmax(eq.residual_norms[eq.failed])),
            markets=[int(market_ids[i]) for i in eq.failed],
        )
