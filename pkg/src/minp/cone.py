"""Geometry of the non-negative orthant.

Three pieces live here:

* the metric projection of a score vector onto ``[0, inf)^k`` under the
  inverse-covariance norm, whose squared length is the cone statistic;
* the maximin direction used by the one-sided joint t statistic;
* chi-bar-squared level probabilities and tail areas for the classical
  reference test.

Each scalar routine has a batched twin (``*_batch``) that processes a stack of
score vectors at once. The batched routines are what the bootstrap calls; the
scalar ones are the reference implementations and are cross-checked against
them in the test suite.
"""

from dataclasses import dataclass
from itertools import combinations

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import gammaincc

from minp.errors import NonConvergence
from minp.linalg import RngStream, as_sym, batch_cholesky, cholesky, inverse_pd, mvn_draw

CHUNK = 1 << 16


@dataclass(frozen=True)
class ConeProjection:
    u_bar: np.ndarray
    t_c: float
    active_set: tuple
    multipliers: np.ndarray


@dataclass(frozen=True)
class MaximinDirection:
    d: np.ndarray
    attained_min: float
    constraint_ok: bool


@dataclass(frozen=True)
class ChiBarWeights:
    w: np.ndarray

    @property
    def k(self):
        return len(self.w) - 1


def _nnls(A, b, maxiter):
    """Lawson-Hanson active-set NNLS: min ||A x - b|| subject to x >= 0."""
    n = A.shape[1]
    x = np.zeros(n)
    passive = np.zeros(n, dtype=bool)
    eps = np.finfo(float).eps
    tol = 10 * eps * n * max(np.max(np.abs(A)), 1.0) * max(np.max(np.abs(b)), 1.0)
    w = A.T @ (b - A @ x)
    it = 0
    while not passive.all() and np.max(np.where(passive, -np.inf, w)) > tol:
        it += 1
        if it > maxiter:
            raise NonConvergence(f"active-set loop exceeded {maxiter} iterations")
        t = int(np.argmax(np.where(passive, -np.inf, w)))
        passive[t] = True
        while True:
            s = np.zeros(n)
            idx = np.flatnonzero(passive)
            s[idx] = np.linalg.lstsq(A[:, idx], b, rcond=None)[0]
            if np.all(s[idx] > 0):
                x = s
                break
            blocking = passive & (s <= 0)
            alpha = np.min(x[blocking] / (x[blocking] - s[blocking]))
            x = x + alpha * (s - x)
            drop = passive & (x <= tol)
            x[drop] = 0.0
            passive &= ~drop
        w = A.T @ (b - A @ x)
    return x


def project_orthant(U, G):
    """Project ``U`` onto the non-negative orthant in the ``G^{-1}`` metric.

    Solves ``min_{u >= 0} (U - u)' G^{-1} (U - u)`` by running NNLS on the
    whitened problem ``min ||L^{-1} U - L^{-1} u||`` with ``G = L L'``.

    Parameters
    ----------
    U : array_like, shape (k,)
    G : array_like, shape (k, k)
        Positive definite covariance of ``U``.

    Returns
    -------
    ConeProjection
        Projected point, its quadratic form ``t_c``, the indices held at
        zero, and the multipliers ``G^{-1}(u_bar - U)``.
    """
    U = np.asarray(U, dtype=float).ravel()
    G = as_sym(G)
    k = U.shape[0]
    if G.shape != (k, k):
        raise ValueError(f"U has length {k} but G has shape {G.shape}")
    L = cholesky(G).lower
    Linv = solve_triangular(L, np.eye(k), lower=True)
    u_bar = _nnls(Linv, Linv @ U, maxiter=3 * k)
    Q = Linv.T @ Linv
    t_c = float(u_bar @ Q @ u_bar)
    multipliers = Q @ (u_bar - U)
    active = tuple(int(i) for i in np.flatnonzero(u_bar == 0.0))
    return ConeProjection(u_bar, t_c, active, multipliers)


def _subsets(k, include_empty=True):
    start = 0 if include_empty else 1
    for r in range(start, k + 1):
        yield from combinations(range(k), r)


def project_orthant_batch(U, G):
    """Batched orthant projection by KKT enumeration over free sets.

    For each free set ``F`` (complement ``A`` held at zero) the candidate is
    ``u_F = U_F - G_FA G_AA^{-1} U_A`` with multipliers
    ``lambda_A = -G_AA^{-1} U_A``; the KKT point is the candidate with both
    blocks non-negative. Picking the most-feasible candidate (in standardized
    units) makes the choice robust to roundoff at degenerate points.

    ``G`` is either one ``(k, k)`` matrix shared by every row or a stack
    ``(B, k, k)``. Returns ``(u_bar, t_c)`` with shapes ``(B, k)``, ``(B,)``.
    """
    U = np.atleast_2d(np.asarray(U, dtype=float))
    G = np.asarray(G, dtype=float)
    if G.ndim == 2:
        return _project_shared(U, G)
    B, k = U.shape
    Q = np.linalg.inv(G)
    sd = np.sqrt(np.diagonal(G, axis1=1, axis2=2))
    best_score = np.full(B, -np.inf)
    u_bar = np.zeros((B, k))
    for F in _subsets(k):
        A = [i for i in range(k) if i not in F]
        cand = np.zeros((B, k))
        if A:
            GAA = G[:, A][:, :, A]
            sol = np.linalg.solve(GAA, U[:, A][..., None])[..., 0]
            score = (-sol * sd[:, A]).min(axis=1)
            if F:
                GFA = G[:, F][:, :, A]
                cand[:, F] = U[:, F] - np.einsum("bij,bj->bi", GFA, sol)
        else:
            score = np.full(B, np.inf)
            cand[:, :] = U
        if F:
            score = np.minimum(score, (cand[:, F] / sd[:, F]).min(axis=1))
        better = score > best_score
        best_score = np.where(better, score, best_score)
        u_bar[better] = cand[better]
    t_c = np.einsum("bi,bij,bj->b", u_bar, Q, u_bar)
    return u_bar, np.maximum(t_c, 0.0)


def _colmin(M):
    out = M[:, 0]
    for j in range(1, M.shape[1]):
        out = np.minimum(out, M[:, j])
    return out


def _project_shared(U, G):
    B, k = U.shape
    Q = np.linalg.inv(G)
    sd = np.sqrt(np.diag(G))
    subsets = list(_subsets(k))
    scores = np.empty((len(subsets), B))
    pieces = []
    for s, F in enumerate(subsets):
        F = list(F)
        A = [i for i in range(k) if i not in F]
        if A:
            # row form: sol = U_A G_AA^{-1}, u_F = U_F - sol G_AF
            H = np.linalg.inv(G[np.ix_(A, A)])
            sol = U[:, A] @ H
            score = _colmin(-sol * sd[A])
            cand_F = U[:, F] - sol @ G[np.ix_(A, F)] if F else None
        else:
            score = np.full(B, np.inf)
            cand_F = U
        if F:
            score = np.minimum(score, _colmin(cand_F / sd[F]))
        scores[s] = score
        pieces.append((F, cand_F))
    choice = np.argmax(scores, axis=0)
    u_bar = np.zeros((B, k))
    for s, (F, cand_F) in enumerate(pieces):
        if not F:
            continue
        rows = np.flatnonzero(choice == s)
        if rows.size:
            u_bar[np.ix_(rows, F)] = cand_F[rows]
    t_c = np.einsum("bi,ij,bj->b", u_bar, Q, u_bar)
    return u_bar, np.maximum(t_c, 0.0)


def _min_norm_point(M):
    """Minimum-norm point of the hull of vectors with Gram matrix ``M``.

    Enumerates every face (non-empty index subset). On a face ``S`` the
    affine minimizer has barycentric weights proportional to
    ``M_S^{-1} 1``; faces whose weights are all non-negative give points of
    the hull, and the smallest of those is the hull minimum.
    Returns ``(weights, squared_norm)``.
    """
    k = M.shape[0]
    best = (None, np.inf)
    for S in _subsets(k, include_empty=False):
        S = list(S)
        MS = M[np.ix_(S, S)]
        try:
            v = np.linalg.solve(MS, np.ones(len(S)))
        except np.linalg.LinAlgError:
            continue
        total = v.sum()
        if not total > 0:
            continue
        mu = v / total
        if np.min(mu) < -1e-12:
            continue
        sq = 1.0 / total
        if sq < best[1] - 1e-15:
            weights = np.zeros(k)
            weights[S] = np.maximum(mu, 0.0)
            best = (weights, sq)
    return best


def maximin_direction(G):
    """Direction ``d`` for the one-sided joint t statistic ``d' G^{-1} U``.

    Maximizes the smallest value of ``d' G^{-1} g`` over the standardized
    extreme rays ``g_i = e_i / sqrt((G^{-1})_ii)`` subject to
    ``d' G^{-1} d = 1`` and ``d >= 0``. In whitened coordinates the optimum is
    the normalized minimum-norm point of the hull of the whitened rays, and
    the optimal value is that point's norm.
    """
    G = as_sym(G)
    k = G.shape[0]
    L = cholesky(G).lower
    Q = inverse_pd(G)
    scale = 1.0 / np.sqrt(np.diag(Q))
    rays = solve_triangular(L, np.diag(scale), lower=True)  # columns L^{-1} g_i
    M = rays.T @ rays
    mu, sq = _min_norm_point(M)
    norm = np.sqrt(sq)
    a = rays @ mu / norm
    d = np.maximum(L @ a, 0.0)
    d = d / np.sqrt(d @ Q @ d)
    attained = float(np.min(scale * (Q @ d)))
    ok = bool(np.all(Q @ d >= -1e-8))
    if not ok:
        d, attained = refine_direction(G, d)
    return MaximinDirection(d, attained, ok)


def refine_direction(G, d0, iterations=200):
    """Projected ascent on ``{d >= 0, G^{-1} d >= 0, d' G^{-1} d = 1}``.

    Works in ``v = G^{-1} d`` coordinates, where the objective is
    ``min_i v_i / sqrt((G^{-1})_ii)``. Each step moves the worst coordinate
    up, clips both sign constraints, renormalizes, and halves the step when
    the objective fails to improve.
    """
    G = as_sym(G)
    Q = inverse_pd(G)
    scale = 1.0 / np.sqrt(np.diag(Q))

    def feasible(v):
        v = np.maximum(v, 0.0)
        d = np.maximum(G @ v, 0.0)
        nrm = np.sqrt(d @ Q @ d)
        if nrm == 0:
            return None
        return d / nrm

    def objective(d):
        return np.min(scale * (Q @ d))

    d = feasible(Q @ d0)
    if d is None:
        d = feasible(np.ones(len(d0)) / scale)
    best = objective(d)
    step = 1.0
    for _ in range(iterations):
        v = Q @ d
        j = int(np.argmin(scale * v))
        trial = feasible(v + step * scale[j] * np.eye(len(v))[j])
        if trial is not None and objective(trial) > best:
            d, best = trial, objective(trial)
        else:
            step *= 0.5
    return d, float(best)


def maximin_batch(G):
    """Batched maximin directions for a stack ``G[B, k, k]``.

    Same minimum-norm-point construction as :func:`maximin_direction`, done
    through the Gram matrix of the whitened rays,
    ``M_ij = Q_ij / sqrt(Q_ii Q_jj)`` with ``Q = G^{-1}``, so no per-row
    factorization is needed. Returns ``(d, Q)``.
    """
    G = np.asarray(G, dtype=float)
    B, k, _ = G.shape
    Q = np.linalg.inv(G)
    Q = 0.5 * (Q + np.swapaxes(Q, 1, 2))
    scale = 1.0 / np.sqrt(np.diagonal(Q, axis1=1, axis2=2))
    M = Q * scale[:, :, None] * scale[:, None, :]
    best_sq = np.full(B, np.inf)
    weights = np.zeros((B, k))
    for S in _subsets(k, include_empty=False):
        S = list(S)
        MS = M[:, S][:, :, S]
        v = np.linalg.solve(MS, np.ones((B, len(S), 1)))[..., 0]
        total = v.sum(axis=1)
        valid = total > 0
        mu = v / np.where(valid, total, 1.0)[:, None]
        valid &= mu.min(axis=1) >= -1e-12
        sq = 1.0 / np.where(valid, total, np.nan)
        better = valid & (sq < best_sq - 1e-15)
        best_sq = np.where(better, sq, best_sq)
        w = np.zeros((B, k))
        w[:, S] = np.maximum(mu, 0.0)
        weights[better] = w[better]
    d = weights * scale / np.sqrt(best_sq)[:, None]
    return d, Q


def chibar_weights(G, n_draws, rng):
    """Monte Carlo level probabilities of the orthant projection of N(0, G).

    ``w[i]`` is the frequency with which the projection has exactly ``i``
    strictly positive coordinates. Draws are generated in fixed chunks of
    ``CHUNK`` with one substream per chunk, so the result depends only on
    ``(rng, n_draws)``.
    """
    G = as_sym(G)
    k = G.shape[0]
    if n_draws < 1:
        raise ValueError("n_draws must be positive")
    chol = cholesky(G)
    if not isinstance(rng, RngStream):
        raise TypeError("chibar_weights needs an RngStream for chunked determinism")
    counts = np.zeros(k + 1, dtype=np.int64)
    for c, start in enumerate(range(0, n_draws, CHUNK)):
        size = min(CHUNK, n_draws - start)
        Z = mvn_draw(chol, rng.child(c), size=size)
        u_bar, _ = project_orthant_batch(Z, G)
        counts += np.bincount((u_bar > 0).sum(axis=1), minlength=k + 1)
    return ChiBarWeights(counts / n_draws)


def chibar_survival(t, w):
    """``P(sum_i w_i chi2_i >= t)`` with ``chi2_0`` a point mass at zero."""
    w = w.w if isinstance(w, ChiBarWeights) else np.asarray(w, dtype=float)
    t = float(t)
    if t <= 0:
        return float(np.sum(w))
    dof = np.arange(1, len(w))
    return float(np.sum(w[1:] * gammaincc(dof / 2.0, t / 2.0)))


def check_pd_batch(G):
    """Boolean mask of rows of ``G[B, k, k]`` passing the pivot test."""
    _, ok = batch_cholesky(G)
    return ok

