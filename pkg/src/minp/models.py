"""Restricted (null) estimation, score extraction and residual bootstrap.

Only the null model is ever estimated. For each family the tested block of
the score, ``U = J^{-1} s`` restricted to the sign-constrained parameters, has
a regression form:

* linear: ``U`` is the Z-block of OLS of the restricted residuals on
  ``(Z, X)``; its covariance is ``sigma2 * [(D'D)^{-1}]_ZZ``;
* ARCH(k): ``U`` is the slope vector of the regression of squared
  residuals on an intercept and ``k`` of their own lags;
* random coefficients: ``U`` is the slope vector of the regression of
  squared residuals on an intercept and the squared tested covariates.

For the two variance-function families the covariance is ``J^{-1} V J^{-1}``
with ``V`` either the kurtosis-scaled information ``mean(h^2) W'W`` (default)
or the per-observation outer product (``covariance="sandwich"``).
"""

from dataclasses import dataclass, field

import numpy as np

from minp.errors import DataError, DegenerateVariance, RankDeficient, SingularCovariance
from minp.linalg import RngStream, batch_cholesky

FAMILIES = ("linear", "arch", "rc")
COVARIANCES = ("classical", "sandwich")


@dataclass(frozen=True)
class Dataset:
    """Observed sample.

    ``Z`` holds the sign-constrained covariates (empty for ARCH, where the
    tested parameters are the ``lags`` ARCH coefficients). ``X`` holds the free
    covariates, normally ending in an intercept column.
    """

    y: np.ndarray
    Z: np.ndarray
    X: np.ndarray
    family: str
    lags: int = 0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise DataError(f"unknown model family {self.family!r}")
        y = np.asarray(self.y, dtype=float).ravel()
        T = y.shape[0]
        X = np.asarray(self.X, dtype=float).reshape(T, -1) if np.size(self.X) else np.zeros((T, 0))
        Z = np.asarray(self.Z, dtype=float).reshape(T, -1) if np.size(self.Z) else np.zeros((T, 0))
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "Z", Z)
        if self.family == "arch":
            if Z.shape[1] != 0 or self.lags < 1:
                raise DataError("ARCH datasets need lags >= 1 and an empty Z")
        elif Z.shape[1] < 1:
            raise DataError("at least one tested covariate is required")
        for name, a in (("y", y), ("Z", Z), ("X", X)):
            if not np.all(np.isfinite(a)):
                raise DataError(f"non-finite entries in {name}")
        if T <= X.shape[1] + self.k + 1:
            raise DataError(f"T={T} too small for m={X.shape[1]}, k={self.k}")

    @property
    def T(self):
        return self.y.shape[0]

    @property
    def k(self):
        return self.lags if self.family == "arch" else self.Z.shape[1]

    @property
    def start(self):
        """First observation (0-based) entering score sums."""
        return self.lags if self.family == "arch" else 0


@dataclass(frozen=True)
class RestrictedFit:
    psi_hat: np.ndarray
    sigma2_hat: float
    residuals: np.ndarray
    effective_range: tuple
    fitted: np.ndarray = field(repr=False, default=None)


@dataclass(frozen=True)
class ScorePack:
    U: np.ndarray
    G: np.ndarray
    family: str
    T: int

    @property
    def k(self):
        return self.U.shape[0]


def restricted_design(data):
    """Regressors of the null model: ``X`` alone, or ``(Z, X)`` for RC."""
    if data.family == "rc":
        return np.hstack([data.Z, data.X])
    return data.X


def _ols(D, y):
    """OLS via QR. Raises RankDeficient on a collinear design."""
    if D.shape[1] == 0:
        return np.zeros(0)
    q, r = np.linalg.qr(D)
    diag = np.abs(np.diag(r))
    if diag.size and diag.min() <= 1e-10 * max(diag.max(), 1e-300):
        raise RankDeficient("restricted design matrix is rank deficient")
    coef = np.linalg.solve(r, q.T @ y)
    return coef


def fit_restricted(data):
    """Estimate the null model (all tested parameters at zero) by OLS."""
    D = restricted_design(data)
    coef = _ols(D, data.y)
    fitted = D @ coef
    resid = data.y - fitted
    lo = data.start
    sigma2 = float(np.mean(resid[lo:] ** 2))
    if sigma2 <= 1e-12 * float(np.mean(data.y**2)):
        raise DegenerateVariance(f"restricted residual variance {sigma2:.3g} is degenerate")
    return RestrictedFit(coef, sigma2, resid, (lo + 1, data.T), fitted)


def variance_regressors(data, resid):
    """Rows ``w_n`` of the variance-function regression, tested block first.

    ARCH: ``(e2_{n-1}, ..., e2_{n-k}, 1)`` for n over the effective range.
    RC: ``(z_{n,1}^2, ..., z_{n,k}^2, 1)``.
    """
    if data.family == "arch":
        e2 = resid**2
        k, T = data.lags, data.T
        lags = np.column_stack([e2[k - j : T - j] for j in range(1, k + 1)])
        return np.hstack([lags, np.ones((T - k, 1))])
    return np.hstack([data.Z**2, np.ones((data.T, 1))])


def _check_pd(A, what):
    _, ok = batch_cholesky(A[None])
    if not ok[0]:
        raise SingularCovariance(f"{what} is not positive definite")


def score_pack(data, fit, covariance="classical"):
    """Tested-block score ``U`` and its covariance estimate ``G``.

    Parameters
    ----------
    data : Dataset
    fit : RestrictedFit
        Restricted fit of ``data``.
    covariance : {"classical", "sandwich"}
        Covariance estimator for the ARCH and RC families. "classical" is
        ``mean(h^2) [(W'W)^{-1}]_γγ``, with ``h = e^2 - sigma2``, the
        kurtosis-scaled information form; "sandwich" replaces ``mean(h^2) W'W``
        by the outer product ``sum h_n^2 w_n w_n'``. Ignored for the linear
        family.

    Returns
    -------
    ScorePack
    """
    k = data.k
    if data.family == "linear":
        D = np.hstack([data.Z, data.X])
        DtD = D.T @ D
        _check_pd(DtD, "D'D")
        inv = np.linalg.inv(DtD)
        U = (inv @ (D.T @ fit.residuals))[:k]
        G = fit.sigma2_hat * inv[:k, :k]
    else:
        if covariance not in COVARIANCES:
            raise ValueError(f"unknown covariance estimator {covariance!r}")
        lo = data.start
        W = variance_regressors(data, fit.residuals)
        e2 = fit.residuals[lo:] ** 2
        h = e2 - fit.sigma2_hat
        # J and V carry 1/(2 omega^2) factors that cancel in J^{-1} V J^{-1}
        J = W.T @ W
        _check_pd(J, "Hessian")
        if covariance == "sandwich":
            V = (W * h[:, None] ** 2).T @ W
        else:
            V = np.mean(h**2) * J
        _check_pd(V, "score outer product")
        Jinv = np.linalg.inv(J)
        U = (Jinv @ (W.T @ h))[:k]
        G = (Jinv @ V @ Jinv)[:k, :k]
    G = 0.5 * (G + G.T)
    _check_pd(G, "score covariance")
    return ScorePack(U, G, data.family, data.T)


def centered_residuals(fit):
    return fit.residuals - fit.residuals.mean()


def bootstrap_shocks(fit, n, rng):
    """``n`` rows of shocks drawn with replacement from centered residuals."""
    gen = rng.generator() if isinstance(rng, RngStream) else rng
    pool = centered_residuals(fit)
    idx = gen.integers(0, pool.shape[0], size=(n, pool.shape[0]))
    return pool[idx]


def bootstrap_dataset(data, fit, rng):
    """One null-model bootstrap sample with the covariates held fixed."""
    shocks = bootstrap_shocks(fit, 1, rng)[0]
    return Dataset(fit.fitted + shocks, data.Z, data.X, data.family, data.lags)


class BatchScorer:
    """Vectorized re-estimation of ``(U, G)`` over many bootstrap samples.

    Covariates are fixed across bootstrap samples, so every design-dependent
    quantity is computed once here. ``scores(shocks)`` then refits the null
    model on ``y* = fitted + shocks`` from scratch for each row: because the
    restricted fit is linear in ``y*``, refitting amounts to applying the
    annihilator of the restricted design to the shocks.
    """

    def __init__(self, data, covariance="classical"):
        if covariance not in COVARIANCES:
            raise ValueError(f"unknown covariance estimator {covariance!r}")
        self.covariance = covariance
        self.family = data.family
        self.k = data.k
        self.data = data
        D = restricted_design(data)
        q, _ = np.linalg.qr(D)
        self._q = q
        if data.family == "linear":
            full = np.hstack([data.Z, data.X])
            inv = np.linalg.inv(full.T @ full)
            self._proj = (inv @ full.T)[: self.k]
            self._C = 0.5 * (inv[: self.k, : self.k] + inv[: self.k, : self.k].T)
        elif data.family == "rc":
            self._W = variance_regressors(data, np.zeros(data.T))

    def residuals(self, shocks):
        return shocks - (shocks @ self._q) @ self._q.T

    def scores(self, shocks):
        """Return ``(U, G, ok)`` for each row of ``shocks``.

        For the linear family ``G`` is returned as ``(sigma2, C)`` with
        ``G_b = sigma2[b] * C``; otherwise as a ``(B, k, k)`` stack. ``ok``
        flags rows whose covariance pieces pass the PD test.
        """
        resid = self.residuals(shocks)
        B, T = resid.shape
        k = self.k
        if self.family == "linear":
            U = resid @ self._proj.T
            sigma2 = np.mean(resid**2, axis=1)
            ok = sigma2 > 0
            return U, (sigma2, self._C), ok
        lo = self.data.start
        e2 = resid**2
        if self.family == "arch":
            lagged = np.stack([e2[:, lo - j : T - j] for j in range(1, k + 1)], axis=2)
            W = np.concatenate([lagged, np.ones((B, T - lo, 1))], axis=2)
            J = np.swapaxes(W, 1, 2) @ W
        else:
            W = np.broadcast_to(self._W, (B,) + self._W.shape)
            J = np.broadcast_to(self._W.T @ self._W, (B, k + 1, k + 1))
        y2 = e2[:, lo:]
        omega = y2.mean(axis=1)
        h = y2 - omega[:, None]
        if self.covariance == "sandwich":
            Wh = W * h[:, :, None]
            V = np.swapaxes(Wh, 1, 2) @ Wh
        else:
            V = np.mean(h**2, axis=1)[:, None, None] * J
        _, okJ = batch_cholesky(J)
        _, okV = batch_cholesky(V)
        safe = okJ & okV
        Jsafe = np.where(safe[:, None, None], J, np.eye(k + 1))
        Jinv = np.linalg.inv(Jsafe)
        Wty = (np.swapaxes(W, 1, 2) @ h[:, :, None])[..., 0]
        U = (Jinv @ Wty[:, :, None])[:, :k, 0]
        G = (Jinv @ np.where(safe[:, None, None], V, np.eye(k + 1)) @ Jinv)[:, :k, :k]
        G = 0.5 * (G + np.swapaxes(G, 1, 2))
        _, okG = batch_cholesky(G)
        ok = safe & okG & (omega > 0)
        return U, G, ok
