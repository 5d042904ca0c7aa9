"""Standard merger simulation under an imposed conduct model.

Markups implied by the model are inverted at observed prices, costs are
projected on the cost shifters by OLS and the post-merger equilibrium is
re-solved with the model's conduct applied to the post-merger ownership.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import kernels
from .datagen import Dataset
from .equilibrium import BatchEquilibrium, SolverConfig, solve_structural_batch
from .errors import InvalidInput, RankDeficientDesign, SingularMarkupSystem
from .market_model import ConductSpec, DemandSpec

_CO_OWNED = 1.0 - 1e-12


def owners_from_ownership(H) -> np.ndarray:
    """Label co-owned groups (``H_jk == 1``) with the smallest member index."""
    H = np.asarray(H, dtype=float)
    J = H.shape[0]
    co = (H >= _CO_OWNED) | np.eye(J, dtype=bool)
    co = co | co.T
    # transitive closure; J is tiny
    for _ in range(J):
        co = co | ((co.astype(int) @ co.astype(int)) > 0)
    return np.argmax(co, axis=1)


def model_ownership(dataset: Dataset, model: ConductSpec) -> list:
    """Conduct matrices the model assigns to each market's ownership structure."""
    return [model.ownership(owners_from_ownership(m.ownership)) for m in dataset.markets]


def invert_markups(dataset: Dataset, model: ConductSpec, demand: DemandSpec | None = None) -> np.ndarray:
    """Markups implied by ``model`` at observed shares, stacked over products."""
    demand = demand or dataset.demand
    if model.zero_markup:
        return np.zeros(dataset.layout.n_products)
    blocks = model_ownership(dataset, model)
    m, cond = kernels.markups_flat(dataset.shares, demand.alpha, dataset.layout.flatten_h(blocks), dataset.layout.offsets)
    bad = np.flatnonzero(~np.isfinite(cond) | (cond > 1e12))
    if bad.size:
        raise SingularMarkupSystem("markup system is singular", int(dataset.market_ids[bad[0]]))
    return m


@dataclass(frozen=True)
class ToolkitFit:
    model: ConductSpec
    gamma_hat: np.ndarray
    omega: np.ndarray
    markups: np.ndarray
    r_squared: float
    market_ids: np.ndarray

    def cost(self, w) -> np.ndarray:
        return np.asarray(w) @ self.gamma_hat + self.omega

    def reassembled_prices(self, w) -> np.ndarray:
        return self.markups + self.cost(w)


def fit_costs(c_m, w, rcond: float = 1e-10):
    """OLS of implied costs on cost shifters via a QR factorization.

    Returns ``(gamma_hat, residuals, r_squared)``.
    """
    c = np.asarray(c_m, dtype=float)
    W = np.asarray(w, dtype=float)
    if W.ndim != 2 or W.shape[0] != c.shape[0]:
        raise InvalidInput(f"w has shape {W.shape}, costs have length {c.shape[0]}")
    if W.shape[0] < W.shape[1]:
        raise RankDeficientDesign(f"{W.shape[0]} observations for {W.shape[1]} coefficients")
    Q, R = np.linalg.qr(W)
    d = np.abs(np.diag(R))
    if d.min() <= rcond * max(d.max(), 1e-300):
        raise RankDeficientDesign("cost-shifter matrix is rank deficient")
    gamma = np.linalg.solve(R, Q.T @ c)
    resid = c - W @ gamma
    tss = float(np.sum((c - c.mean()) ** 2))
    r2 = 1.0 - float(resid @ resid) / tss if tss > 0 else 1.0
    return gamma, resid, r2


def fit(dataset: Dataset, model: ConductSpec, demand: DemandSpec | None = None) -> ToolkitFit:
    """Invert markups under ``model`` and regress implied costs on ``w``."""
    markups = invert_markups(dataset, model, demand)
    gamma, omega, r2 = fit_costs(dataset.prices - markups, dataset.w)
    return ToolkitFit(model, gamma, omega, markups, r2, dataset.product_market_ids)


def predict_merger(
    merged: Dataset,
    fit_: ToolkitFit,
    demand: DemandSpec | None = None,
    cfg: SolverConfig = SolverConfig(),
    omega=None,
) -> BatchEquilibrium:
    """Post-merger equilibrium under the fit's conduct model.

    ``merged`` carries the post-merger ownership (see ``apply_merger``) and
    the pre-merger prices, used as starting values.  ``omega`` defaults to
    the fit's residuals and must align with ``merged``'s products; pass
    :func:`implied_shocks` when predicting on markets outside the fit.
    """
    demand = demand or merged.demand
    om = fit_.omega if omega is None else np.asarray(omega, dtype=float)
    if om.shape != (merged.layout.n_products,):
        raise InvalidInput("shocks do not align with the merged dataset")
    cost = merged.w @ fit_.gamma_hat + om
    blocks = model_ownership(merged, fit_.model)
    return solve_structural_batch(
        demand, merged.layout, merged.delta0(demand), cost, merged.layout.flatten_h(blocks), cfg,
        p0=merged.prices, conduct=fit_.model,
    )


def implied_shocks(dataset: Dataset, fit_: ToolkitFit, demand: DemandSpec | None = None) -> np.ndarray:
    """Model-implied cost shocks ``p - markup - w gamma_hat`` on any markets."""
    return dataset.prices - invert_markups(dataset, fit_.model, demand) - dataset.w @ fit_.gamma_hat


def true_post_merger(merged: Dataset, cfg: SolverConfig = SolverConfig(), conduct: ConductSpec | None = None) -> BatchEquilibrium:
    """Equilibrium under the data-generating costs and the post-merger conduct matrix."""
    demand = merged.demand
    conduct = conduct or (merged.scenario.conduct if merged.scenario is not None else None)
    return solve_structural_batch(
        demand, merged.layout, merged.delta0(), merged.true_costs(), merged.h_flat, cfg, p0=merged.prices, conduct=conduct
    )


def save_fit(fit_: ToolkitFit, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    with open(directory / "toolkit_residuals.csv", "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["market_id", "obs", "markup", "omega"])
        for i, (m, mk, om) in enumerate(zip(fit_.market_ids, fit_.markups, fit_.omega)):
            wr.writerow([int(m), i, repr(float(mk)), repr(float(om))])
    with open(directory / "toolkit_gamma.csv", "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["coef", "value"])
        for k, g in enumerate(fit_.gamma_hat):
            wr.writerow([f"gamma{k}", repr(float(g))])
    meta = {"model": fit_.model.to_dict(), "r_squared": fit_.r_squared, "n_obs": int(fit_.omega.size)}
    (directory / "toolkit_fit.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_fit(directory) -> ToolkitFit:
    directory = Path(directory)
    meta = json.loads((directory / "toolkit_fit.json").read_text())
    with open(directory / "toolkit_gamma.csv") as fh:
        gamma = np.array([float(r["value"]) for r in csv.DictReader(fh)])
    with open(directory / "toolkit_residuals.csv") as fh:
        rows = list(csv.DictReader(fh))
    return ToolkitFit(
        ConductSpec.from_dict(meta["model"]),
        gamma,
        np.array([float(r["omega"]) for r in rows]),
        np.array([float(r["markup"]) for r in rows]),
        float(meta["r_squared"]),
        np.array([int(r["market_id"]) for r in rows], dtype=np.int64),
    )
