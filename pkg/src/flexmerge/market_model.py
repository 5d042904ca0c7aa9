"""Logit demand, ownership/conduct matrices and the markup layer."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInput, SingularMarkupSystem

COND_LIMIT = 1e12


def _frozen(a, dtype=float):
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class DemandSpec:
    """Simple logit demand with the outside good normalized to zero utility.

    ``beta`` multiplies the characteristic matrix, whose first column is the
    constant.
    """

    alpha: float = -0.25
    beta: tuple = (-4.0, 3.0, 6.0)

    def __post_init__(self):
        if not np.isfinite(self.alpha) or self.alpha >= 0:
            raise InvalidInput(f"alpha must be negative, got {self.alpha}")
        object.__setattr__(self, "beta", tuple(float(b) for b in self.beta))

    @property
    def n_characteristics(self) -> int:
        return len(self.beta)

    def mean_utility(self, x, xi) -> np.ndarray:
        """Price-free part of mean utility, ``x @ beta + xi``."""
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != len(self.beta):
            raise InvalidInput(f"x has {x.shape[-1]} columns, beta has {len(self.beta)}")
        return x @ np.asarray(self.beta) + np.asarray(xi, dtype=float)

    def shares(self, prices, x, xi) -> np.ndarray:
        return logit_shares(self.mean_utility(x, xi) + self.alpha * np.asarray(prices, dtype=float))

    def derivatives(self, shares) -> np.ndarray:
        return logit_derivatives(shares, self.alpha)


class ConductKind(str, enum.Enum):
    BERTRAND = "Bertrand"
    MONOPOLY = "Monopoly"
    PERFECT_COMPETITION = "PerfectCompetition"
    PROFIT_WEIGHT = "ProfitWeight"


@dataclass(frozen=True)
class ConductSpec:
    kind: ConductKind = ConductKind.BERTRAND
    kappa: float | None = None

    def __post_init__(self):
        kind = ConductKind(self.kind)
        object.__setattr__(self, "kind", kind)
        if kind is ConductKind.PROFIT_WEIGHT:
            if self.kappa is None or not (0.0 <= self.kappa <= 1.0):
                raise InvalidInput("ProfitWeight conduct needs kappa in [0, 1]")
        elif self.kappa is not None:
            raise InvalidInput(f"kappa is only meaningful for ProfitWeight, not {kind.value}")

    @classmethod
    def bertrand(cls):
        return cls(ConductKind.BERTRAND)

    @classmethod
    def monopoly(cls):
        return cls(ConductKind.MONOPOLY)

    @classmethod
    def perfect_competition(cls):
        return cls(ConductKind.PERFECT_COMPETITION)

    @classmethod
    def profit_weight(cls, kappa=0.75):
        return cls(ConductKind.PROFIT_WEIGHT, float(kappa))

    @property
    def label(self) -> str:
        if self.kind is ConductKind.PROFIT_WEIGHT:
            return f"ProfitWeight({self.kappa:g})"
        return self.kind.value

    @property
    def zero_markup(self) -> bool:
        return self.kind is ConductKind.PERFECT_COMPETITION

    def ownership(self, owners) -> np.ndarray:
        """Conduct matrix for products whose owners are given by ``owners``.

        Products with the same owner always carry weight one.  Across owners
        the weight is 0 (Bertrand), 1 (Monopoly) or kappa (ProfitWeight).
        Perfect competition ignores the matrix; identity across owners is
        returned so the array stays well formed.
        """
        owners = np.asarray(owners)
        same = (owners[:, None] == owners[None, :]).astype(float)
        if self.kind is ConductKind.MONOPOLY:
            return np.ones_like(same)
        if self.kind is ConductKind.PROFIT_WEIGHT:
            return same + (1.0 - same) * self.kappa
        return same

    def to_dict(self) -> dict:
        d = {"kind": self.kind.value}
        if self.kappa is not None:
            d["kappa"] = self.kappa
        return d

    @classmethod
    def from_dict(cls, d) -> "ConductSpec":
        return cls(ConductKind(d["kind"]), d.get("kappa"))


@dataclass(frozen=True)
class MarketData:
    """One market's products.

    ``omega`` is the true cost shock and is ``None`` for observed data.
    ``firm_ids`` label the original owner of each product and are what
    mergers act on.
    """

    market_id: int
    prices: np.ndarray
    shares: np.ndarray
    x: np.ndarray
    w: np.ndarray
    xi: np.ndarray
    ownership: np.ndarray
    omega: np.ndarray | None = None
    firm_ids: np.ndarray | None = field(default=None)

    def __post_init__(self):
        J = np.size(self.prices)
        if J < 1:
            raise InvalidInput("a market needs at least one product")
        set_ = lambda name, value: object.__setattr__(self, name, value)
        set_("market_id", int(self.market_id))
        set_("prices", _frozen(self.prices).reshape(J))
        set_("shares", _frozen(self.shares).reshape(J))
        set_("x", _frozen(self.x).reshape(J, -1))
        set_("w", _frozen(self.w).reshape(J, -1))
        set_("xi", _frozen(self.xi).reshape(J))
        set_("ownership", _frozen(self.ownership).reshape(J, J))
        if self.omega is not None:
            set_("omega", _frozen(self.omega).reshape(J))
        firm_ids = np.arange(J) if self.firm_ids is None else self.firm_ids
        set_("firm_ids", _frozen(firm_ids, dtype=np.int64).reshape(J))
        self.validate()

    @property
    def J(self) -> int:
        return self.prices.shape[0]

    @property
    def outside_share(self) -> float:
        return 1.0 - float(self.shares.sum())

    def validate(self):
        tag = f"market {self.market_id}"
        if not np.all((self.shares > 0) & (self.shares < 1)):
            raise InvalidInput(f"{tag}: shares must lie strictly inside (0, 1)")
        if self.shares.sum() >= 1:
            raise InvalidInput(f"{tag}: inside shares sum to {self.shares.sum():.6f} >= 1")
        if not np.all(self.prices > 0):
            raise InvalidInput(f"{tag}: prices must be positive")
        H = self.ownership
        if not np.allclose(np.diag(H), 1.0):
            raise InvalidInput(f"{tag}: ownership diagonal must be one")
        if np.any(H < 0) or np.any(H > 1):
            raise InvalidInput(f"{tag}: ownership entries must lie in [0, 1]")
        for name in ("prices", "shares", "x", "w", "xi"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise InvalidInput(f"{tag}: non-finite {name}")

    def replace(self, **changes) -> "MarketData":
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d.update(changes)
        return MarketData(**d)


def logit_shares(delta) -> np.ndarray:
    """Logit shares ``exp(delta_j) / (1 + sum_k exp(delta_k))``.

    The last axis indexes products; leading axes are broadcast, so a stack
    of markets with equal product counts can be passed at once.
    """
    delta = np.asarray(delta, dtype=float)
    if delta.ndim == 0 or delta.shape[-1] < 1:
        raise InvalidInput("delta must have at least one product")
    if not np.all(np.isfinite(delta)):
        raise InvalidInput("delta must be finite")
    shift = np.maximum(delta.max(axis=-1, keepdims=True), 0.0)
    e = np.exp(delta - shift)
    return e / (np.exp(-shift) + e.sum(axis=-1, keepdims=True))


def logit_derivatives(shares, alpha) -> np.ndarray:
    """Matrix of share derivatives ``D[j, k] = d s_j / d p_k`` under logit.

    ``D_jj = alpha s_j (1 - s_j)`` and ``D_jk = -alpha s_j s_k``.  Leading
    axes are broadcast.
    """
    s = np.asarray(shares, dtype=float)
    if np.any(s <= 0) or np.any(s >= 1) or np.any(s.sum(axis=-1) >= 1):
        raise InvalidInput("shares must lie in the open simplex")
    eye = np.eye(s.shape[-1])
    return alpha * (s[..., :, None] * eye - s[..., :, None] * s[..., None, :])


def conduct_markup(shares, D, H, conduct: ConductSpec | None = None, market_id=None) -> np.ndarray:
    """Markups solving the stacked first-order conditions ``(-H * D') m = s``.

    Perfect competition short-circuits to zero markups.  The solve uses LU
    with partial pivoting; a condition number above ``COND_LIMIT`` raises
    :class:`SingularMarkupSystem`.
    """
    s = np.asarray(shares, dtype=float)
    if conduct is not None and conduct.zero_markup:
        return np.zeros_like(s)
    A = -np.asarray(H, dtype=float) * np.swapaxes(np.asarray(D, dtype=float), -1, -2)
    cond = np.linalg.cond(A, 1)
    if np.any(~np.isfinite(cond)) or np.any(cond > COND_LIMIT):
        raise SingularMarkupSystem(f"markup system condition number {np.max(cond):.3g}", market_id)
    return np.linalg.solve(A, s[..., None])[..., 0]


def marginal_cost(w, gamma, omega=None) -> np.ndarray:
    """Marginal cost ``w @ gamma + omega``."""
    w = np.asarray(w, dtype=float)
    gamma = np.asarray(gamma, dtype=float)
    if w.shape[-1] != gamma.shape[0]:
        raise InvalidInput(f"w has {w.shape[-1]} columns but gamma has {gamma.shape[0]} entries")
    c = w @ gamma
    if omega is not None:
        omega = np.asarray(omega, dtype=float)
        if omega.shape != c.shape:
            raise InvalidInput(f"omega shape {omega.shape} does not match cost shape {c.shape}")
        c = c + omega
    return c


def own_price_elasticities(prices, shares, alpha) -> np.ndarray:
    return alpha * np.asarray(prices) * (1.0 - np.asarray(shares))


def outside_diversion(shares) -> np.ndarray:
    """Diversion from each product to the outside good, ``s_0 / (1 - s_j)``."""
    s = np.asarray(shares, dtype=float)
    return (1.0 - s.sum(axis=-1, keepdims=True)) / (1.0 - s)
