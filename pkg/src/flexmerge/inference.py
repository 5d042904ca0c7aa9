"""Standard errors for point values of a fitted supply function.

The variance of ``h_x(theta_hat)`` is the value of a quadratic min-max
program over an adjustment vector ``gamma`` and a critic ``f``.  For a
critic that is linear in features ``Phi`` the inner supremum is available in
closed form, so the program alternates a closed-form ``gamma`` step with
ascent on the critic's hidden layers.  Simultaneous intervals over several
points take the union of Holm step-down bounds over all orderings.
"""

from __future__ import annotations

import csv
import itertools
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import nets
from .datagen import TRAIN, Dataset
from .errors import InvalidInput, NegativeVarianceClipped, PermutationBudgetExceeded, TrainingDiverged
from .nets import NetSpec
from .vmm import EstimationResult, _Critic, critic_inputs, encode_dataset

HOLM_EXACT = "HolmExact"
BONFERRONI = "Bonferroni"
D_MAX = 8


# ---------------------------------------------------------------------------
# normal quantile

# Acklam's rational approximation, relative error below 1.2e-9 before refinement
_A = (-3.969683028665376e01, 2.209460984245205e02, -2.759285104469687e02, 1.383577518672690e02, -3.066479806614716e01, 2.506628277459239e00)
_B = (-5.447609879822406e01, 1.615858368580409e02, -1.556989798598866e02, 6.680131188771972e01, -1.328068155288572e01)
_C = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e00, -2.549732539343734e00, 4.374664141464968e00, 2.938163982698783e00)
_D = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e00, 3.754408661907416e00)
_P_LOW = 0.02425


def _acklam(p: float) -> float:
    if p < _P_LOW:
        q = math.sqrt(-2.0 * math.log(p))
        return (((((_C[0] * q + _C[1]) * q + _C[2]) * q + _C[3]) * q + _C[4]) * q + _C[5]) / (
            (((_D[0] * q + _D[1]) * q + _D[2]) * q + _D[3]) * q + 1.0
        )
    if p > 1.0 - _P_LOW:
        return -_acklam(1.0 - p)
    q = p - 0.5
    r = q * q
    return (((((_A[0] * r + _A[1]) * r + _A[2]) * r + _A[3]) * r + _A[4]) * r + _A[5]) * q / (
        ((((_B[0] * r + _B[1]) * r + _B[2]) * r + _B[3]) * r + _B[4]) * r + 1.0
    )


def norm_ppf(p: float) -> float:
    """Standard normal quantile: Acklam's approximation plus one Halley step."""
    p = float(p)
    if not 0.0 < p < 1.0:
        raise InvalidInput(f"probability must lie in (0, 1), got {p}")
    if p > 0.5:
        # 1 - p is exact here, and the refinement is accurate in the lower tail
        return -norm_ppf(1.0 - p)
    x = _acklam(p)
    # Halley refinement against the exact CDF
    e = 0.5 * math.erfc(-x / math.sqrt(2.0)) - p
    u = e * math.sqrt(2.0 * math.pi) * math.exp(0.5 * x * x)
    return x - u / (1.0 + 0.5 * x * u)


def critical_value(alpha: float) -> float:
    """Two-sided critical value ``z_{1 - alpha/2}``."""
    if not 0.0 < alpha < 1.0:
        raise InvalidInput(f"alpha must lie in (0, 1), got {alpha}")
    return norm_ppf(1.0 - 0.5 * alpha)


# ---------------------------------------------------------------------------
# functional gradients


def functional_gradient(h, x, theta=None) -> np.ndarray:
    """Reverse-mode gradient of ``h`` at encoded input(s) ``x`` w.r.t. its parameters.

    ``h`` is any object with ``evaluate(X, theta)`` and ``grad_theta(X, theta)``
    (e.g. :class:`flexmerge.vmm.SupplyFunction`).  A single input returns a
    vector of length ``b``, a batch returns ``(d, b)``.
    """
    x = np.asarray(x, dtype=float)
    g = h.grad_theta(np.atleast_2d(x), theta)
    return g[0] if x.ndim == 1 else g


def difference_step(n_obs) -> float:
    """Step ``N^{-1/4}``; it shrinks to zero while ``N eps / log N`` diverges."""
    if n_obs < 2:
        raise InvalidInput("need at least two observations")
    return float(n_obs) ** -0.25


def numerical_gradient(h, x, theta, n_obs, scheme: str = "forward") -> np.ndarray:
    """Finite-difference counterpart of :func:`functional_gradient`.

    Coordinate ``i`` moves by ``eps * max(1, |theta_i|)`` with
    ``eps = difference_step(n_obs)``.
    """
    theta = np.asarray(theta, dtype=float)
    X = np.atleast_2d(np.asarray(x, dtype=float))
    eps = difference_step(n_obs)
    steps = eps * np.maximum(1.0, np.abs(theta))
    base = h.evaluate(X, theta)
    out = np.empty((X.shape[0], theta.size))
    for i, s in enumerate(steps):
        up = theta.copy()
        up[i] += s
        if scheme == "forward":
            out[:, i] = (h.evaluate(X, up) - base) / s
        elif scheme == "central":
            dn = theta.copy()
            dn[i] -= s
            out[:, i] = (h.evaluate(X, up) - h.evaluate(X, dn)) / (2 * s)
        else:
            raise InvalidInput(f"unknown difference scheme {scheme!r}")
    return out[0] if np.ndim(x) == 1 else out


# ---------------------------------------------------------------------------
# variance program


@dataclass(frozen=True)
class VarianceConfig:
    """Critic class and optimization budget of the variance program.

    ``critic_hidden=()`` is the linear critic in the standardized inputs.
    The last hidden width should exceed the number of model parameters so
    the information matrix can be full rank; the default suits the small
    supply network.  ``gamma_ridge`` is relative to the mean eigenvalue of the information
    matrix and keeps the ``gamma`` step defined when the model has more
    parameters than the critic has features.
    """

    critic_hidden: tuple = (50, 50)
    activation: str = "SoftPlus"
    rounds: int = 30
    critic_steps: int = 5
    lr_critic: float = 0.1
    gamma_ridge: float = 1e-6
    moment_ridge: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "critic_hidden", tuple(int(v) for v in self.critic_hidden))
        if self.rounds < 1 or self.critic_steps < 0:
            raise InvalidInput("rounds must be positive and critic_steps non-negative")
        if self.gamma_ridge < 0 or self.moment_ridge < 0:
            raise InvalidInput("ridge terms must be non-negative")

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d["critic_hidden"] = list(self.critic_hidden)
        return d

    @classmethod
    def from_dict(cls, d) -> "VarianceConfig":
        return cls(**d)


@dataclass(frozen=True)
class VarianceEstimate:
    sigma_hat: float
    gamma_hat: np.ndarray
    objective_value: float
    n_obs: int
    clipped: bool = False
    trace: list = field(default_factory=list)

    @property
    def variance(self) -> float:
        return self.sigma_hat**2

    @property
    def standard_error(self) -> float:
        return self.sigma_hat / math.sqrt(self.n_obs)


def _gamma_step(Phi, Jw, v, beta, ridge, moment_ridge):
    """Closed-form ``gamma`` and the attained objective for fixed critic features."""
    n = Phi.shape[0]
    G = Phi.T @ Jw / n
    S = (Phi * v[:, None]).T @ Phi / n
    S = S + moment_ridge * (np.trace(S) / S.shape[0] + 1e-300) * np.eye(S.shape[0])
    SiG = np.linalg.solve(S, G)
    M = G.T @ SiG
    lam = ridge * (np.trace(M) / M.shape[0] + 1e-300)
    gamma = 2.0 * np.linalg.solve(M + lam * np.eye(M.shape[0]), beta)
    Gg = G @ gamma
    obj = float(Gg @ np.linalg.solve(S, Gg) - 4.0 * gamma @ beta)
    return gamma, obj


def variance_arrays(beta, jac_h, omega, Z, cfg: VarianceConfig = VarianceConfig()) -> VarianceEstimate:
    """Variance program on arrays.

    ``jac_h`` holds per-observation gradients of ``h`` (n, b), so the
    residual gradient is ``-jac_h``; ``omega`` are residuals at the
    estimate and ``Z`` the (standardized) critic inputs.  Units of
    ``beta``, ``jac_h`` and ``omega`` must agree.
    """
    beta = np.asarray(beta, dtype=float)
    Jw = -np.asarray(jac_h, dtype=float)
    omega = np.asarray(omega, dtype=float)
    Z = np.asarray(Z, dtype=float)
    n, b = Jw.shape
    if beta.shape != (b,) or omega.shape != (n,) or Z.shape[0] != n:
        raise InvalidInput("beta, jacobian, residuals and critic inputs do not align")
    v = omega**2
    spec = NetSpec(Z.shape[1], cfg.critic_hidden, 1, cfg.activation, cfg.seed)
    crit = _Critic(spec, Z, cfg.moment_ridge)
    psi = nets.init(spec)
    trace = []
    gamma, obj = _gamma_step(crit.features(psi), Jw, v, beta, cfg.gamma_ridge, cfg.moment_ridge)
    rounds = cfg.rounds if (crit.trunc is not None and cfg.critic_steps > 0) else 0
    for r in range(rounds):
        if not np.any(gamma):
            break
        # the critic ascends the inner value for the current gamma
        psi, _ = crit.ascend(psi, Jw @ gamma, v, cfg.lr_critic, cfg.critic_steps)
        gamma, obj = _gamma_step(crit.features(psi), Jw, v, beta, cfg.gamma_ridge, cfg.moment_ridge)
        trace.append({"round": r, "objective": obj})
        if not np.isfinite(obj):
            raise TrainingDiverged("variance program became non-finite", trace)
    if not np.isfinite(obj):
        raise TrainingDiverged("variance program became non-finite", trace)
    var = -0.25 * obj
    clipped = var < 0
    if clipped:
        warnings.warn(f"attained variance {var:.3g} clipped to zero", NegativeVarianceClipped, stacklevel=2)
        var = 0.0
    return VarianceEstimate(math.sqrt(var), gamma, obj, n, bool(clipped), trace)


def sandwich_variance(beta, jac_h, omega, Z) -> float:
    """``beta' (G' S^{-1} G)^{-1} beta`` with instruments ``[Z, 1]``: the GMM sandwich."""
    Phi = np.column_stack([np.asarray(Z, dtype=float), np.ones(len(omega))])
    n = Phi.shape[0]
    G = Phi.T @ np.asarray(jac_h, dtype=float) / n
    S = (Phi * (np.asarray(omega) ** 2)[:, None]).T @ Phi / n
    M = G.T @ np.linalg.solve(S, G)
    return float(beta @ np.linalg.solve(M, beta))


@dataclass(frozen=True)
class _Sample:
    X: np.ndarray
    Z: np.ndarray
    jac: np.ndarray
    omega: np.ndarray


def _training_sample(est: EstimationResult, dataset: Dataset, demand=None) -> _Sample:
    train = dataset.split_subset(TRAIN) if dataset.split_labels is not None else dataset
    if len(train) == 0:
        raise InvalidInput("no training markets")
    X = encode_dataset(train, est.supply.enc, demand)
    Z = est.z_norm(critic_inputs(train, est.critic_includes_w))
    omega = train.prices - est.supply.evaluate(X)
    return _Sample(X, Z, est.supply.grad_theta(X), omega)


def variance(beta, est: EstimationResult, dataset: Dataset, cfg: VarianceConfig = VarianceConfig(), demand=None) -> VarianceEstimate:
    """Variance of the functional with gradient ``beta`` on the training sample of ``dataset``."""
    s = _training_sample(est, dataset, demand)
    return variance_arrays(beta, s.jac, s.omega, s.Z, cfg)


# ---------------------------------------------------------------------------
# simultaneous intervals


@dataclass(frozen=True)
class SimultaneousCI:
    points: np.ndarray
    centers: np.ndarray
    sigmas: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    method: str
    alpha: float
    n_obs: int

    @property
    def standard_errors(self) -> np.ndarray:
        return self.sigmas / math.sqrt(self.n_obs)

    @property
    def width(self) -> np.ndarray:
        return self.upper - self.lower


def holm_levels(alpha: float, d: int) -> np.ndarray:
    """``alpha_k = alpha / (d + 1 - k)`` for ``k = 1..d``."""
    return np.array([alpha / (d + 1 - k) for k in range(1, d + 1)])


def simultaneous_ci(centers, sigmas, n_obs: int, alpha: float = 0.05, method: str = HOLM_EXACT, d_max: int = D_MAX, points=None) -> SimultaneousCI:
    """Simultaneous intervals for ``d`` point values.

    ``HolmExact`` assigns the Holm critical values to the points in every
    order and returns the union of the resulting bounds; ``Bonferroni``
    uses level ``alpha / d`` throughout.
    """
    centers = np.atleast_1d(np.asarray(centers, dtype=float))
    sigmas = np.atleast_1d(np.asarray(sigmas, dtype=float))
    d = centers.size
    if d < 1 or sigmas.shape != centers.shape:
        raise InvalidInput("need matching, non-empty centers and sigmas")
    if np.any(sigmas < 0) or not np.all(np.isfinite(sigmas)):
        raise InvalidInput("sigmas must be finite and non-negative")
    if n_obs < 1:
        raise InvalidInput("n_obs must be positive")
    se = sigmas / math.sqrt(n_obs)
    if method == HOLM_EXACT:
        if d > d_max:
            raise PermutationBudgetExceeded(f"{d} points need {math.factorial(d)} orderings; use {BONFERRONI} or raise d_max")
        crit = np.array([critical_value(a) for a in holm_levels(alpha, d)])
        lower = np.full(d, np.inf)
        upper = np.full(d, -np.inf)
        for perm in itertools.permutations(range(d)):
            idx = np.array(perm)
            lo = centers[idx] - se[idx] * crit
            hi = centers[idx] + se[idx] * crit
            lower[idx] = np.minimum(lower[idx], lo)
            upper[idx] = np.maximum(upper[idx], hi)
    elif method == BONFERRONI:
        z = critical_value(alpha / d)
        lower, upper = centers - z * se, centers + z * se
    else:
        raise InvalidInput(f"unknown method {method!r}")
    pts = np.arange(d) if points is None else np.asarray(points)
    return SimultaneousCI(pts, centers, sigmas, lower, upper, method, float(alpha), int(n_obs))


def point_inference(
    est: EstimationResult,
    dataset: Dataset,
    X_points,
    alpha: float = 0.05,
    method: str = HOLM_EXACT,
    cfg: VarianceConfig = VarianceConfig(),
    demand=None,
) -> tuple:
    """Centers, variance estimates and simultaneous intervals at encoded inputs.

    Returns ``(SimultaneousCI, [VarianceEstimate, ...])``.
    """
    X_points = np.atleast_2d(np.asarray(X_points, dtype=float))
    s = _training_sample(est, dataset, demand)
    betas = functional_gradient(est.supply, X_points)
    ests = [variance_arrays(b, s.jac, s.omega, s.Z, cfg) for b in betas]
    centers = est.supply.evaluate(X_points)
    ci = simultaneous_ci(centers, [e.sigma_hat for e in ests], s.X.shape[0], alpha, method, points=X_points)
    return ci, ests


CI_COLUMNS = ("point_id", "center", "sigma", "lower", "upper", "method", "alpha")


def write_ci(path, ci: SimultaneousCI) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(CI_COLUMNS)
        for j in range(ci.centers.size):
            wr.writerow([j, repr(float(ci.centers[j])), repr(float(ci.sigmas[j])), repr(float(ci.lower[j])), repr(float(ci.upper[j])), ci.method, repr(ci.alpha)])


def read_ci(path) -> list:
    with open(Path(path)) as fh:
        rows = list(csv.DictReader(fh))
    conv = {"point_id": int, "center": float, "sigma": float, "lower": float, "upper": float, "alpha": float}
    return [{k: conv.get(k, str)(v) for k, v in r.items()} for r in rows]
