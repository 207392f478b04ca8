"""Dense symmetric linear algebra and seeded random streams.

Matrices here are small (k <= 8, q <= 12), so everything is dense numpy.
Positive definiteness is decided by the Cholesky pivots: a pivot at or below
``PIVOT_TOL * max(diag(A))`` is treated as singular and raised as
:class:`~minp.errors.NotPositiveDefinite`, never regularized away.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_triangular

from minp.errors import NotPositiveDefinite

PIVOT_TOL = 1e-12
SYM_TOL = 1e-12


def as_sym(A):
    """Validate and return ``A`` as a float symmetric matrix."""
    A = np.asarray(A, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1] or A.shape[0] == 0:
        raise ValueError(f"expected a non-empty square matrix, got shape {A.shape}")
    if not np.all(np.isfinite(A)):
        raise ValueError("matrix has non-finite entries")
    scale = max(np.max(np.abs(A)), 1.0)
    if np.max(np.abs(A - A.T)) > SYM_TOL * scale:
        raise ValueError("matrix is not symmetric")
    return A


@dataclass(frozen=True)
class CholFactor:
    lower: np.ndarray

    @property
    def dim(self):
        return self.lower.shape[0]


def cholesky(A):
    """Cholesky factor ``L`` with ``L @ L.T == A``.

    Plain column-by-column Cholesky-Banachiewicz. Deterministic: no pivoting,
    no BLAS reductions of varying order.
    """
    A = as_sym(A)
    n = A.shape[0]
    threshold = PIVOT_TOL * np.max(np.diag(A))
    L = np.zeros_like(A)
    for j in range(n):
        pivot = A[j, j] - L[j, :j] @ L[j, :j]
        if not pivot > threshold:
            raise NotPositiveDefinite(
                f"pivot {pivot:.3g} at index {j} is not positive", pivot=j
            )
        L[j, j] = np.sqrt(pivot)
        for i in range(j + 1, n):
            L[i, j] = (A[i, j] - L[i, :j] @ L[j, :j]) / L[j, j]
    return CholFactor(L)


def cho_solve(chol, b):
    L = chol.lower
    z = solve_triangular(L, b, lower=True)
    return solve_triangular(L.T, z, lower=False)


def solve_pd(A, b):
    """Solve ``A x = b`` for positive definite ``A``."""
    return cho_solve(cholesky(A), np.asarray(b, dtype=float))


def inverse_pd(A):
    chol = cholesky(A)
    inv = cho_solve(chol, np.eye(chol.dim))
    return 0.5 * (inv + inv.T)


def batch_cholesky(A):
    """Vectorized Cholesky over a stack ``A[..., n, n]``.

    Returns ``(L, ok)``; rows failing the pivot test get ``ok=False`` and an
    identity-padded factor so downstream batch algebra stays finite.
    """
    A = np.asarray(A, dtype=float)
    n = A.shape[-1]
    diag = np.diagonal(A, axis1=-2, axis2=-1)
    threshold = PIVOT_TOL * np.max(diag, axis=-1)
    ok = np.all(np.isfinite(A), axis=(-2, -1))
    L = np.zeros_like(A)
    for j in range(n):
        pivot = A[..., j, j] - np.einsum("...i,...i->...", L[..., j, :j], L[..., j, :j])
        good = pivot > threshold
        ok &= good
        L[..., j, j] = np.sqrt(np.where(good, pivot, 1.0))
        for i in range(j + 1, n):
            s = np.einsum("...i,...i->...", L[..., i, :j], L[..., j, :j])
            L[..., i, j] = (A[..., i, j] - s) / L[..., j, j]
    return L, ok


def is_pd(A):
    try:
        cholesky(A)
    except NotPositiveDefinite:
        return False
    return True


@dataclass(frozen=True)
class RngStream:
    """A reproducible random stream addressed by ``(seed, stream_id)``.

    Backed by numpy's ``SeedSequence`` spawn keys, so the draw sequence is a
    pure function of the address: identical on every platform and for any
    worker count. ``child`` derives nested substreams (replication ->
    bootstrap block -> redraw attempt) without shared state.
    """

    seed: int
    stream_id: int = 0
    path: tuple = field(default=())

    def generator(self):
        key = tuple(int(p) for p in self.path) + (int(self.stream_id),)
        ss = np.random.SeedSequence(int(self.seed), spawn_key=key)
        return np.random.Generator(np.random.PCG64(ss))

    def child(self, stream_id):
        return RngStream(self.seed, int(stream_id), self.path + (self.stream_id,))


def mvn_draw(chol, rng, size=None):
    """Draw ``L @ z`` with ``z`` standard normal.

    With ``size=None`` a single vector is returned; otherwise an array of
    shape ``(size, dim)``. ``rng`` may be an :class:`RngStream` or a live
    numpy ``Generator``.
    """
    gen = rng.generator() if isinstance(rng, RngStream) else rng
    L = chol.lower
    if size is None:
        return L @ gen.standard_normal(L.shape[0])
    return gen.standard_normal((size, L.shape[0])) @ L.T
