"""Monte Carlo markets: logit demand, linear costs, equilibrium prices.

Each market owns an independent Philox stream spawned from the scenario
seed (``SeedSequence(seed).spawn(T)[t]``), so a market's draws do not depend
on how many other markets are generated or in which order.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path

import numpy as np

from .equilibrium import SolverConfig, solve_structural_batch
from .errors import GenerationFailure, InvalidInput, MergerScopeError, StratificationError
from .kernels import Layout
from .market_model import ConductSpec, DemandSpec, MarketData, logit_derivatives, outside_diversion

TRAIN, TEST = "Train", "Test"
_SPLIT_STREAM = 0x5EED5


@dataclass(frozen=True)
class ScenarioConfig:
    T: int = 1000
    firm_counts: tuple = (2, 3)
    firm_weights: tuple = (0.5, 0.5)
    demand: DemandSpec = field(default_factory=DemandSpec)
    gamma: tuple = (3.0, 6.0, 4.0)
    shock_corr: float = 0.9
    char_mean: float = 1.0
    char_sd: float = 0.25
    conduct: ConductSpec = field(default_factory=ConductSpec.bertrand)
    seed: int = 0
    split_fraction: float = 0.8
    target_observations: int | None = None

    def __post_init__(self):
        if self.T < 1:
            raise InvalidInput("T must be at least 1")
        if not -1 < self.shock_corr < 1:
            raise InvalidInput("shock_corr must lie in (-1, 1)")
        if not 0 < self.split_fraction < 1:
            raise InvalidInput("split_fraction must lie in (0, 1)")
        if len(self.firm_counts) != len(self.firm_weights) or not np.isclose(sum(self.firm_weights), 1.0):
            raise InvalidInput("firm_weights must match firm_counts and sum to one")
        if min(self.firm_counts) < 1:
            raise InvalidInput("firm counts must be positive")
        object.__setattr__(self, "firm_counts", tuple(int(j) for j in self.firm_counts))
        object.__setattr__(self, "firm_weights", tuple(float(p) for p in self.firm_weights))
        object.__setattr__(self, "gamma", tuple(float(g) for g in self.gamma))

    def to_dict(self) -> dict:
        return {
            "T": self.T,
            "firm_counts": list(self.firm_counts),
            "firm_weights": list(self.firm_weights),
            "demand": {"alpha": self.demand.alpha, "beta": list(self.demand.beta)},
            "gamma": list(self.gamma),
            "shock_corr": self.shock_corr,
            "char_mean": self.char_mean,
            "char_sd": self.char_sd,
            "conduct": self.conduct.to_dict(),
            "seed": self.seed,
            "split_fraction": self.split_fraction,
            "target_observations": self.target_observations,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioConfig":
        d = dict(d)
        if "demand" in d:
            d["demand"] = DemandSpec(d["demand"]["alpha"], tuple(d["demand"]["beta"]))
        if "conduct" in d:
            d["conduct"] = ConductSpec.from_dict(d["conduct"])
        for key in ("firm_counts", "firm_weights", "gamma"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass(frozen=True)
class Dataset:
    markets: tuple
    scenario: ScenarioConfig | None = None
    split_labels: tuple | None = None
    merger: tuple | None = None
    affected: tuple | None = None

    def __post_init__(self):
        object.__setattr__(self, "markets", tuple(self.markets))
        if self.split_labels is not None:
            labels = tuple(self.split_labels)
            if len(labels) != len(self.markets) or not set(labels) <= {TRAIN, TEST}:
                raise InvalidInput("split_labels must assign train/test to every market")
            object.__setattr__(self, "split_labels", labels)

    def __len__(self):
        return len(self.markets)

    @cached_property
    def layout(self) -> Layout:
        return Layout.from_sizes([m.J for m in self.markets])

    def _cat(self, name):
        return np.concatenate([getattr(m, name) for m in self.markets])

    @cached_property
    def prices(self):
        return self._cat("prices")

    @cached_property
    def shares(self):
        return self._cat("shares")

    @cached_property
    def x(self):
        return self._cat("x")

    @cached_property
    def w(self):
        return self._cat("w")

    @cached_property
    def xi(self):
        return self._cat("xi")

    @cached_property
    def omega(self):
        if any(m.omega is None for m in self.markets):
            return None
        return self._cat("omega")

    @cached_property
    def firm_ids(self):
        return self._cat("firm_ids")

    @cached_property
    def h_flat(self):
        return np.concatenate([m.ownership.ravel() for m in self.markets])

    @cached_property
    def market_ids(self):
        return np.array([m.market_id for m in self.markets], dtype=np.int64)

    @cached_property
    def sizes(self):
        return self.layout.sizes

    @property
    def product_market_ids(self):
        return np.repeat(self.market_ids, self.sizes)

    @property
    def demand(self) -> DemandSpec:
        return self.scenario.demand if self.scenario is not None else DemandSpec()

    def delta0(self, demand: DemandSpec | None = None):
        return (demand or self.demand).mean_utility(self.x, self.xi)

    def true_costs(self):
        if self.omega is None or self.scenario is None:
            raise InvalidInput("true costs need the scenario and the cost shocks")
        return self.w @ np.asarray(self.scenario.gamma) + self.omega

    def derivatives(self, demand: DemandSpec | None = None) -> list:
        alpha = (demand or self.demand).alpha
        return [logit_derivatives(m.shares, alpha) for m in self.markets]

    def labels_by_product(self):
        if self.split_labels is None:
            raise InvalidInput("dataset has no split")
        return np.repeat(np.array(self.split_labels), self.sizes)

    def subset(self, mask) -> "Dataset":
        mask = np.asarray(mask, dtype=bool)
        pick = lambda seq: None if seq is None else tuple(v for v, keep in zip(seq, mask) if keep)
        return Dataset(
            pick(self.markets), self.scenario, pick(self.split_labels), self.merger, pick(self.affected)
        )

    def split_subset(self, label) -> "Dataset":
        if self.split_labels is None:
            raise InvalidInput("dataset has no split")
        return self.subset([lab == label for lab in self.split_labels])

    def with_ownership(self, ownerships, **changes) -> "Dataset":
        markets = [m.replace(ownership=H) for m, H in zip(self.markets, ownerships)]
        return replace(self, markets=tuple(markets), **changes)


def _market_stream(seed, T):
    return [np.random.Generator(np.random.Philox(s)) for s in np.random.SeedSequence(seed).spawn(T)]


def _draw_market(cfg: ScenarioConfig, rng, chol):
    J = int(rng.choice(cfg.firm_counts, p=cfg.firm_weights))
    kx = cfg.demand.n_characteristics
    kw = len(cfg.gamma)
    x = np.column_stack([np.ones(J), rng.normal(cfg.char_mean, cfg.char_sd, (J, kx - 1))])
    w = np.column_stack([np.ones(J), rng.normal(cfg.char_mean, cfg.char_sd, (J, kw - 1))])
    shocks = rng.standard_normal((J, 2)) @ chol.T
    return J, x, w, shocks[:, 0], shocks[:, 1]


def generate(cfg: ScenarioConfig, solver: SolverConfig = SolverConfig()) -> Dataset:
    """Draw markets and solve for equilibrium prices under ``cfg.conduct``.

    Product characteristics and cost shifters (beyond the constant) are iid
    normal with mean ``char_mean`` and standard deviation ``char_sd``; the
    demand and cost shocks are standard bivariate normal with correlation
    ``shock_corr``.  Firms are single-product and labelled ``0..J-1``.
    """
    chol = np.linalg.cholesky(np.array([[1.0, cfg.shock_corr], [cfg.shock_corr, 1.0]]))
    draws = []
    if cfg.target_observations is None:
        for rng in _market_stream(cfg.seed, cfg.T):
            draws.append(_draw_market(cfg, rng, chol))
    else:
        # markets are drawn in id order until the product count reaches the target
        seq = np.random.SeedSequence(cfg.seed)
        n = 0
        while n < cfg.target_observations:
            rng = np.random.Generator(np.random.Philox(seq.spawn(1)[0]))
            draws.append(_draw_market(cfg, rng, chol))
            n += draws[-1][0]
    sizes = [d[0] for d in draws]
    layout = Layout.from_sizes(sizes)
    x = np.concatenate([d[1] for d in draws])
    w = np.concatenate([d[2] for d in draws])
    xi = np.concatenate([d[3] for d in draws])
    omega = np.concatenate([d[4] for d in draws])
    owners = [np.arange(J) for J in sizes]
    H_blocks = [cfg.conduct.ownership(o) for o in owners]
    cost = w @ np.asarray(cfg.gamma) + omega
    delta0 = cfg.demand.mean_utility(x, xi)
    eq = solve_structural_batch(cfg.demand, layout, delta0, cost, layout.flatten_h(H_blocks), solver, conduct=cfg.conduct)
    if eq.failed.size:
        raise GenerationFailure(f"{eq.failed.size} market(s) failed to reach equilibrium", eq.failed.tolist())
    markets = []
    for t, J in enumerate(sizes):
        sl = slice(layout.offsets[t], layout.offsets[t + 1])
        try:
            markets.append(
                MarketData(t, eq.prices[sl], eq.shares[sl], x[sl], w[sl], xi[sl], H_blocks[t], omega[sl], owners[t])
            )
        except InvalidInput as exc:
            raise GenerationFailure(str(exc), [t]) from exc
    ds = Dataset(tuple(markets), cfg)
    return split(ds, cfg.split_fraction, cfg.seed) if len(ds) >= 2 else ds


def split(dataset: Dataset, fraction: float, seed) -> Dataset:
    """Assign whole markets to train/test, stratified by product count.

    Markets are ordered by ``market_id`` before assignment, so the result
    does not depend on input order.  The train total is
    ``round(fraction * T)`` and is allotted to strata by largest remainder.
    """
    if not 0 < fraction < 1:
        raise InvalidInput("fraction must lie in (0, 1)")
    T = len(dataset)
    if T < 2:
        raise StratificationError(f"cannot split {T} market(s) into non-empty train and test sets")
    order = np.argsort(dataset.market_ids, kind="stable")
    sizes = dataset.sizes[order]
    n_train = int(np.clip(round(fraction * T), 1, T - 1))
    strata = np.unique(sizes)
    counts = np.array([np.sum(sizes == J) for J in strata])
    quota = fraction * counts
    alloc = np.floor(quota).astype(int)
    remainder = n_train - alloc.sum()
    for i in np.argsort(-(quota - alloc), kind="stable")[:remainder]:
        alloc[i] += 1
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), _SPLIT_STREAM])))
    labels = np.empty(T, dtype=object)
    for J, k in zip(strata, alloc):
        members = order[sizes == J]
        perm = rng.permutation(members.size)
        chosen = np.zeros(members.size, dtype=bool)
        chosen[perm[:k]] = True
        labels[members[chosen]] = TRAIN
        labels[members[~chosen]] = TEST
    return replace(dataset, split_labels=tuple(labels))


def post_merger_owners(firm_ids, merging) -> np.ndarray:
    a, b = merging
    owners = np.array(firm_ids, copy=True)
    owners[owners == b] = a
    return owners


def apply_merger(dataset: Dataset, merging=(1, 2), markets=None) -> Dataset:
    """Joint ownership of the two merging firms' products.

    Markets containing both firms are targeted unless ``markets`` (market
    ids) is given.  Cross entries between the merging firms' products are
    set to one; every other entry, and all shocks, are carried over.
    """
    a, b = merging
    if a == b:
        raise InvalidInput("a merger needs two distinct firms")
    present = np.array([np.isin(a, m.firm_ids) and np.isin(b, m.firm_ids) for m in dataset.markets])
    if markets is None:
        target = present
        if not target.any():
            raise MergerScopeError(f"no market contains both firms {a} and {b}")
    else:
        target = np.isin(dataset.market_ids, list(markets))
        missing = target & ~present
        if missing.any():
            raise MergerScopeError(f"firms {a}, {b} absent from markets {dataset.market_ids[missing].tolist()}")
    new_h = []
    for m, hit in zip(dataset.markets, target):
        H = m.ownership.copy()
        if hit:
            ia = m.firm_ids == a
            ib = m.firm_ids == b
            merged = ia | ib
            H[np.ix_(merged, merged)] = 1.0
        new_h.append(H)
    return dataset.with_ownership(new_h, merger=(a, b), affected=tuple(bool(t) for t in target))


def summary_statistics(dataset: Dataset) -> dict:
    """Mean own-price elasticity, mean outside diversion and shock correlation."""
    alpha = dataset.demand.alpha
    elast = alpha * dataset.prices * (1.0 - dataset.shares)
    div = np.concatenate([outside_diversion(m.shares) for m in dataset.markets])
    out = {
        "mean_own_elasticity": float(elast.mean()),
        "mean_outside_diversion": float(div.mean()),
        "n_markets": len(dataset),
        "n_products": int(dataset.layout.n_products),
    }
    if dataset.omega is not None:
        out["shock_correlation"] = float(np.corrcoef(dataset.xi, dataset.omega)[0, 1])
    return out


# ---------------------------------------------------------------------------
# persistence


def _fmt(v) -> str:
    return repr(float(v))


def dataset_to_csv(dataset: Dataset, path) -> None:
    """One row per product-market; the ownership row is stored in own_* columns."""
    jmax = int(dataset.sizes.max())
    kx = dataset.markets[0].x.shape[1]
    kw = dataset.markets[0].w.shape[1]
    header = ["market_id", "firm_id", "price", "share"]
    header += [f"x{k}" for k in range(kx)] + [f"w{k}" for k in range(kw)]
    header += ["xi", "omega"] + [f"own_{k}" for k in range(jmax)] + ["split", "affected"]
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for t, m in enumerate(dataset.markets):
        label = "" if dataset.split_labels is None else dataset.split_labels[t]
        affected = "" if dataset.affected is None else int(dataset.affected[t])
        for j in range(m.J):
            row = [m.market_id, int(m.firm_ids[j]), _fmt(m.prices[j]), _fmt(m.shares[j])]
            row += [_fmt(v) for v in m.x[j]] + [_fmt(v) for v in m.w[j]]
            row += [_fmt(m.xi[j]), "" if m.omega is None else _fmt(m.omega[j])]
            row += [_fmt(v) for v in m.ownership[j]] + [""] * (jmax - m.J)
            row += [label, affected]
            writer.writerow(row)
    Path(path).write_text(buf.getvalue())


def dataset_from_csv(path, scenario: ScenarioConfig | None = None) -> Dataset:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise InvalidInput(f"{path} has no rows")
    cols = rows[0].keys()
    xcols = sorted((c for c in cols if c[0] == "x" and c[1:].isdigit()), key=lambda c: int(c[1:]))
    wcols = sorted((c for c in cols if c[0] == "w" and c[1:].isdigit()), key=lambda c: int(c[1:]))
    groups: dict[int, list] = {}
    for r in rows:
        groups.setdefault(int(r["market_id"]), []).append(r)
    markets, labels, affected = [], [], []
    for mid, rs in groups.items():
        J = len(rs)
        f = lambda key: np.array([float(r[key]) for r in rs])
        omega = None if rs[0]["omega"] == "" else f("omega")
        H = np.array([[float(r[f"own_{k}"]) for k in range(J)] for r in rs])
        markets.append(
            MarketData(
                mid, f("price"), f("share"),
                np.array([[float(r[c]) for c in xcols] for r in rs]),
                np.array([[float(r[c]) for c in wcols] for r in rs]),
                f("xi"), H, omega, np.array([int(r["firm_id"]) for r in rs]),
            )
        )
        labels.append(rs[0].get("split", ""))
        affected.append(rs[0].get("affected", ""))
    split_labels = tuple(labels) if all(labels) else None
    aff = tuple(bool(int(a)) for a in affected) if all(a != "" for a in affected) else None
    return Dataset(tuple(markets), scenario, split_labels, None, aff)


def save_dataset(dataset: Dataset, directory) -> None:
    """Write ``markets.csv`` plus the ``scenario.json`` sidecar."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    dataset_to_csv(dataset, directory / "markets.csv")
    meta = {"scenario": None if dataset.scenario is None else dataset.scenario.to_dict(), "merger": dataset.merger}
    (directory / "scenario.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_dataset(directory) -> Dataset:
    directory = Path(directory)
    meta = json.loads((directory / "scenario.json").read_text())
    scenario = None if meta["scenario"] is None else ScenarioConfig.from_dict(meta["scenario"])
    ds = dataset_from_csv(directory / "markets.csv", scenario)
    merger = tuple(meta["merger"]) if meta.get("merger") else None
    return replace(ds, merger=merger)
