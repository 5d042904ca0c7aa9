"""Batched logit equilibrium kernels.

Markets are stored ragged: product-level arrays are concatenated and
``offsets[t]:offsets[t + 1]`` selects market ``t``.  Conduct matrices are
concatenated row-major blocks of size ``J_t * J_t``.

Every kernel has a numba implementation (per-market loop) and a numpy
implementation (vectorized over markets with the same product count).  The
numba path is used unless ``FLEXMERGE_NUMBA=0``; both are kept in the test
suite and compared in ``benchmarks/bench_kernels.py``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _backend
from ._backend import njit
from .market_model import COND_LIMIT

ZETA, NEWTON, HYBRID = 0, 1, 2
OK, NOT_CONVERGED, SINGULAR = 0, 1, 2
HYBRID_WARMUP = 20


@dataclass(frozen=True)
class Layout:
    offsets: np.ndarray  # (T + 1,)

    @classmethod
    def from_sizes(cls, sizes) -> "Layout":
        sizes = np.asarray(sizes, dtype=np.int64)
        return cls(np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64))

    @property
    def sizes(self) -> np.ndarray:
        return np.diff(self.offsets)

    @property
    def n_markets(self) -> int:
        return self.offsets.size - 1

    @property
    def n_products(self) -> int:
        return int(self.offsets[-1])

    @property
    def h_offsets(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum(self.sizes**2)]).astype(np.int64)

    def market_of_product(self) -> np.ndarray:
        return np.repeat(np.arange(self.n_markets), self.sizes)

    def groups(self):
        """Yield ``(J, market_idx, product_idx)`` with ``product_idx`` of shape (M, J)."""
        sizes = self.sizes
        for J in np.unique(sizes):
            idx = np.flatnonzero(sizes == J)
            yield int(J), idx, self.offsets[idx][:, None] + np.arange(J)

    def stack_h(self, h_flat, market_idx, J) -> np.ndarray:
        start = self.h_offsets[market_idx]
        return h_flat[start[:, None] + np.arange(J * J)].reshape(-1, J, J)

    def flatten_h(self, blocks) -> np.ndarray:
        """Inverse of :meth:`stack_h` for a list of per-market matrices."""
        return np.concatenate([np.asarray(b, dtype=float).ravel() for b in blocks])


# ---------------------------------------------------------------------------
# numpy implementations (markets with equal J stacked along axis 0)


def _np_shares(delta):
    shift = np.maximum(delta.max(axis=-1, keepdims=True), 0.0)
    e = np.exp(delta - shift)
    return e / (np.exp(-shift) + e.sum(axis=-1, keepdims=True))


def _np_cond1(A):
    with np.errstate(all="ignore"):
        c = np.linalg.cond(A, 1)
    return np.where(np.isnan(c), np.inf, c)


def _np_solve(A, b):
    """Batched ``A x = b``; exactly singular systems give NaN rows instead of raising."""
    try:
        return np.linalg.solve(A, b[..., None])[..., 0]
    except np.linalg.LinAlgError:
        bad = ~(_np_cond1(A) <= COND_LIMIT)
        A = np.where(bad[:, None, None], np.eye(A.shape[-1]), A)
        x = np.linalg.solve(A, b[..., None])[..., 0]
        x[bad] = np.nan
        return x


def _np_markups(s, alpha, H):
    J = s.shape[-1]
    D = alpha * (s[..., :, None] * np.eye(J) - s[..., :, None] * s[..., None, :])
    A = -H * np.swapaxes(D, -1, -2)
    return _np_solve(A, s), A


def _np_residual(p, delta0, alpha, cost, H, zero_markup):
    if zero_markup:
        return p - cost
    s = _np_shares(delta0 + alpha * p)
    m, _ = _np_markups(s, alpha, H)
    return p - cost - m


def _np_solve_group(delta0, alpha, cost, H, p0, zero_markup, tol, max_iter, damping, method):
    M, J = delta0.shape
    p = p0.copy()
    iters = np.zeros(M, dtype=np.int64)
    status = np.full(M, NOT_CONVERGED, dtype=np.int64)
    if zero_markup:
        return cost.copy(), iters, np.zeros(M), np.full(M, OK, dtype=np.int64)
    with np.errstate(all="ignore"):
        r = _np_residual(p, delta0, alpha, cost, H, False)
        rn = np.abs(r).max(axis=1)
        active = ~(rn <= tol)
        status[~active] = OK
        for it in range(1, max_iter + 1):
            if not active.any():
                break
            a = np.flatnonzero(active)
            pa, ca, Ha, da = p[a], cost[a], H[a], delta0[a]
            if method == ZETA or (method == HYBRID and it <= HYBRID_WARMUP):
                s = _np_shares(da + alpha * pa)
                zeta = -1.0 / alpha + np.einsum("mjk,mk->mj", Ha, s * (pa - ca))
                pn = pa + damping * (ca + zeta - pa)
                rna = None
            else:
                ra = r[a]
                step = 1e-5 * (1.0 + np.abs(pa))
                Jac = np.empty((a.size, J, J))
                for k in range(J):
                    e = np.zeros(J)
                    e[k] = 1.0
                    hk = step[:, k : k + 1]
                    rp = _np_residual(pa + hk * e, da, alpha, ca, Ha, False)
                    rm = _np_residual(pa - hk * e, da, alpha, ca, Ha, False)
                    Jac[:, :, k] = (rp - rm) / (2.0 * hk)
                dp = -_np_solve(Jac, ra)
                # backtracking on the sup-norm residual
                t = np.ones(a.size)
                base = np.abs(ra).max(axis=1)
                pn = pa + dp
                rna = np.abs(_np_residual(pn, da, alpha, ca, Ha, False)).max(axis=1)
                for _ in range(30):
                    bad = ~(rna < base) & (t > 1e-6)
                    if not bad.any():
                        break
                    t[bad] *= 0.5
                    pn[bad] = pa[bad] + t[bad, None] * dp[bad]
                    rna[bad] = np.abs(
                        _np_residual(pn[bad], da[bad], alpha, ca[bad], Ha[bad], False)
                    ).max(axis=1)
            p[a] = pn
            iters[a] = it
            r[a] = _np_residual(pn, da, alpha, ca, Ha, False)
            rn[a] = np.abs(r[a]).max(axis=1)
            done = rn[a] <= tol
            status[a[done]] = OK
            active[a[done]] = False
        s = _np_shares(delta0 + alpha * p)
        _, A = _np_markups(s, alpha, H)
        cond = _np_cond1(A)
    status[(~np.isfinite(cond)) | (cond > COND_LIMIT) | ~np.isfinite(rn)] = SINGULAR
    return p, iters, rn, status


def _np_solve_structural(delta0, alpha, cost, h_flat, offsets, p0, zero_markup, tol, max_iter, damping, method):
    layout = Layout(offsets)
    prices = np.empty_like(p0)
    T = layout.n_markets
    iters = np.zeros(T, dtype=np.int64)
    resid = np.zeros(T)
    status = np.zeros(T, dtype=np.int64)
    for J, midx, pidx in layout.groups():
        H = layout.stack_h(h_flat, midx, J)
        p, it, rn, st = _np_solve_group(
            delta0[pidx], alpha, cost[pidx], H, p0[pidx], zero_markup, tol, max_iter, damping, method
        )
        prices[pidx] = p
        iters[midx], resid[midx], status[midx] = it, rn, st
    return prices, iters, resid, status


def _np_markups_flat(shares, alpha, h_flat, offsets):
    layout = Layout(offsets)
    out = np.empty_like(shares)
    cond = np.zeros(layout.n_markets)
    for J, midx, pidx in layout.groups():
        H = layout.stack_h(h_flat, midx, J)
        m, A = _np_markups(shares[pidx], alpha, H)
        out[pidx] = m
        cond[midx] = _np_cond1(A)
    return out, cond


# ---------------------------------------------------------------------------
# numba implementations (one market at a time)


@njit(cache=True)
def _nb_shares_into(delta0, alpha, p, out):
    J = p.size
    shift = 0.0
    for j in range(J):
        out[j] = delta0[j] + alpha * p[j]
        if out[j] > shift:
            shift = out[j]
    denom = np.exp(-shift)
    for j in range(J):
        out[j] = np.exp(out[j] - shift)
        denom += out[j]
    for j in range(J):
        out[j] /= denom


@njit(cache=True)
def _nb_system_into(s, alpha, H, A):
    J = s.size
    for j in range(J):
        for k in range(J):
            # D[k, j] = alpha * s_k * (1{k == j} - s_j)
            d_kj = alpha * s[k] * ((1.0 if k == j else 0.0) - s[j])
            A[j, k] = -H[j, k] * d_kj


@njit(cache=True)
def _nb_system(s, alpha, H):
    A = np.empty((s.size, s.size))
    _nb_system_into(s, alpha, H, A)
    return A


@njit(cache=True)
def _nb_solve_into(A, b, M, x):
    """Gaussian elimination with partial pivoting into ``x``; ``M`` is scratch.

    Markets are tiny, so this beats a LAPACK call per system.
    """
    J = b.size
    for r in range(J):
        x[r] = b[r]
        for k in range(J):
            M[r, k] = A[r, k]
    for c in range(J):
        piv = c
        for r in range(c + 1, J):
            if abs(M[r, c]) > abs(M[piv, c]):
                piv = r
        if piv != c:
            for k in range(J):
                tmp = M[c, k]
                M[c, k] = M[piv, k]
                M[piv, k] = tmp
            tmp = x[c]
            x[c] = x[piv]
            x[piv] = tmp
        d = M[c, c]
        if d == 0.0:
            x[:] = np.nan
            return
        for r in range(c + 1, J):
            f = M[r, c] / d
            for k in range(c, J):
                M[r, k] -= f * M[c, k]
            x[r] -= f * x[c]
    for c in range(J - 1, -1, -1):
        acc = x[c]
        for k in range(c + 1, J):
            acc -= M[c, k] * x[k]
        x[c] = acc / M[c, c]


@njit(cache=True)
def _nb_cond1(A):
    """1-norm condition number; inf for a singular matrix."""
    J = A.shape[0]
    M = np.empty((J, J))
    e = np.zeros(J)
    col = np.empty(J)
    na = 0.0
    ni = 0.0
    for k in range(J):
        c = 0.0
        for j in range(J):
            c += abs(A[j, k])
        na = max(na, c)
        e[:] = 0.0
        e[k] = 1.0
        _nb_solve_into(A, e, M, col)
        c = 0.0
        for j in range(J):
            c += abs(col[j])
        if not np.isfinite(c):
            return np.inf
        ni = max(ni, c)
    return na * ni


@njit(cache=True)
def _nb_residual_into(p, delta0, alpha, cost, H, s, A, M, m, r):
    """Structural residual ``p - c - markup(p)`` into ``r``; returns its sup norm."""
    _nb_shares_into(delta0, alpha, p, s)
    _nb_system_into(s, alpha, H, A)
    _nb_solve_into(A, s, M, m)
    out = 0.0
    for j in range(p.size):
        r[j] = p[j] - cost[j] - m[j]
        a = abs(r[j])
        if not a <= out:
            out = a
    return out


@njit(cache=True)
def _nb_solve_market(delta0, alpha, cost, H, p0, tol, max_iter, damping, method):
    J = p0.size
    p = p0.copy()
    pn = np.empty(J)
    pt = np.empty(J)
    dp = np.empty(J)
    r = np.empty(J)
    rt = np.empty(J)
    s = np.empty(J)
    m = np.empty(J)
    A = np.empty((J, J))
    M = np.empty((J, J))
    Jac = np.empty((J, J))
    rn = _nb_residual_into(p, delta0, alpha, cost, H, s, A, M, m, r)
    it = 0
    while not rn <= tol and it < max_iter:
        it += 1
        if method == ZETA or (method == HYBRID and it <= HYBRID_WARMUP):
            _nb_shares_into(delta0, alpha, p, s)
            for j in range(J):
                acc = -1.0 / alpha
                for k in range(J):
                    acc += H[j, k] * s[k] * (p[k] - cost[k])
                pn[j] = p[j] + damping * (cost[j] + acc - p[j])
        else:
            for k in range(J):
                hk = 1e-5 * (1.0 + abs(p[k]))
                for j in range(J):
                    pt[j] = p[j]
                pt[k] = p[k] + hk
                _nb_residual_into(pt, delta0, alpha, cost, H, s, A, M, m, rt)
                for j in range(J):
                    Jac[j, k] = rt[j]
                pt[k] = p[k] - hk
                _nb_residual_into(pt, delta0, alpha, cost, H, s, A, M, m, rt)
                for j in range(J):
                    Jac[j, k] = (Jac[j, k] - rt[j]) / (2.0 * hk)
            _nb_solve_into(Jac, r, M, dp)
            t = 1.0
            for j in range(J):
                pn[j] = p[j] - dp[j]
            rnn = _nb_residual_into(pn, delta0, alpha, cost, H, s, A, M, m, rt)
            for _ in range(30):
                if rnn < rn or t <= 1e-6:
                    break
                t *= 0.5
                for j in range(J):
                    pn[j] = p[j] - t * dp[j]
                rnn = _nb_residual_into(pn, delta0, alpha, cost, H, s, A, M, m, rt)
        for j in range(J):
            p[j] = pn[j]
        rn = _nb_residual_into(p, delta0, alpha, cost, H, s, A, M, m, r)
    _nb_shares_into(delta0, alpha, p, s)
    _nb_system_into(s, alpha, H, A)
    cond = _nb_cond1(A)
    if not (cond <= COND_LIMIT) or not np.isfinite(rn):
        status = SINGULAR
    elif rn <= tol:
        status = OK
    else:
        status = NOT_CONVERGED
    return p, it, rn, status


@njit(cache=True)
def _nb_solve_structural(delta0, alpha, cost, h_flat, offsets, p0, zero_markup, tol, max_iter, damping, method):
    T = offsets.size - 1
    prices = np.empty_like(p0)
    iters = np.zeros(T, dtype=np.int64)
    resid = np.zeros(T)
    status = np.zeros(T, dtype=np.int64)
    hoff = 0
    for t in range(T):
        a = offsets[t]
        b = offsets[t + 1]
        J = b - a
        H = h_flat[hoff : hoff + J * J].copy().reshape((J, J))
        hoff += J * J
        if zero_markup:
            prices[a:b] = cost[a:b]
            continue
        p, it, rn, st = _nb_solve_market(
            delta0[a:b].copy(), alpha, cost[a:b].copy(), H, p0[a:b].copy(), tol, max_iter, damping, method
        )
        prices[a:b] = p
        iters[t] = it
        resid[t] = rn
        status[t] = st
    return prices, iters, resid, status


@njit(cache=True)
def _nb_markups_flat(shares, alpha, h_flat, offsets):
    T = offsets.size - 1
    out = np.empty_like(shares)
    cond = np.zeros(T)
    hoff = 0
    for t in range(T):
        a = offsets[t]
        b = offsets[t + 1]
        J = b - a
        H = h_flat[hoff : hoff + J * J].copy().reshape((J, J))
        hoff += J * J
        s = shares[a:b].copy()
        A = _nb_system(s, alpha, H)
        cond[t] = _nb_cond1(A)
        _nb_solve_into(A, s, np.empty((J, J)), out[a:b])
    return out, cond


# ---------------------------------------------------------------------------
# dispatch


def solve_structural_flat(
    delta0, alpha, cost, h_flat, offsets, p0, *, zero_markup=False, tol=1e-6, max_iter=1000, damping=1.0, method=ZETA, backend=None
):
    """Solve ``p = c + markup(p)`` for every market in a ragged batch.

    Returns ``(prices, iterations, residual_norms, status)`` where status is
    one of ``OK``, ``NOT_CONVERGED``, ``SINGULAR`` per market.
    """
    args = (
        np.ascontiguousarray(delta0, dtype=float),
        float(alpha),
        np.ascontiguousarray(cost, dtype=float),
        np.ascontiguousarray(h_flat, dtype=float),
        np.ascontiguousarray(offsets, dtype=np.int64),
        np.ascontiguousarray(p0, dtype=float),
        bool(zero_markup),
        float(tol),
        int(max_iter),
        float(damping),
        int(method),
    )
    if _resolve(backend) == "numba":
        return _nb_solve_structural(*args)
    return _np_solve_structural(*args)


def markups_flat(shares, alpha, h_flat, offsets, backend=None):
    """Stacked-FOC markups for a ragged batch; returns ``(markups, cond)``."""
    args = (
        np.ascontiguousarray(shares, dtype=float),
        float(alpha),
        np.ascontiguousarray(h_flat, dtype=float),
        np.ascontiguousarray(offsets, dtype=np.int64),
    )
    if _resolve(backend) == "numba":
        return _nb_markups_flat(*args)
    return _np_markups_flat(*args)


def _resolve(backend):
    if backend is None:
        return "numba" if _backend.use_numba() else "numpy"
    if backend not in ("numba", "numpy"):
        raise ValueError(f"unknown backend {backend!r}")
    if backend == "numba" and not _backend.HAVE_NUMBA:
        return "numpy"
    return backend
