"""Test statistics, bootstrap pools, MinP global tests and stepdown testing.

Conventions (all fixed, see README):

* every statistic rejects for large values, so p-values count the upper
  tail, ``#{pool >= observed} / B``;
* p-values of pool members are self-inclusive and never below ``1/B``;
* the alpha critical value is the ``floor(alpha * B)``-th smallest per-draw
  minimum, or 0 when that index is 0; a zero critical value never rejects,
  even against an observed p-value of 0;
* stepdown ties are broken by hypothesis index.
"""

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
import math
import multiprocessing

import numpy as np

from minp.cone import (
    MaximinDirection,
    maximin_batch,
    maximin_direction,
    project_orthant,
    project_orthant_batch,
)
from minp.errors import ArityMismatch, BootstrapDegenerate
from minp.linalg import RngStream, inverse_pd
from minp.models import BatchScorer, bootstrap_shocks

BLOCK = 1024
MAX_ATTEMPTS = 3
MAX_FAILURE_RATE = 0.01


class MinPVariant(str, Enum):
    S = "s"
    SC = "sc"
    ST = "st"

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        return cls(str(value).lower())


@dataclass(frozen=True)
class StatVector:
    t_c: float
    t_t: float
    t_i: np.ndarray
    direction: MaximinDirection

    def row(self):
        """Pool layout: ``(t_c, t_t, t_1, ..., t_k)``."""
        return np.concatenate([[self.t_c, self.t_t], self.t_i])


@dataclass(frozen=True)
class BootstrapPool:
    stats: np.ndarray
    pool_pvalues: np.ndarray
    redraws: int = 0
    failures: int = 0

    @property
    def B(self):
        return self.stats.shape[0]

    @property
    def k(self):
        return self.stats.shape[1] - 2


@dataclass(frozen=True)
class GlobalTestResult:
    variant: MinPVariant
    p_m: float
    c_m: float
    reject: bool
    observed_pvalues: np.ndarray  # (p_c, p_t, p_1, ..., p_k)

    @property
    def p_i(self):
        return self.observed_pvalues[2:]


@dataclass(frozen=True)
class Step:
    index: int
    pvalue: float
    critical_value: float
    reject: bool


@dataclass(frozen=True)
class StepdownResult:
    order: tuple
    steps: tuple = field(default=())
    K_hat: frozenset = field(default=frozenset())
    global_reject: bool = False


def compute_stats(pack):
    """Cone, maximin-t and individual standardized statistics."""
    U, G = pack.U, pack.G
    proj = project_orthant(U, G)
    direction = maximin_direction(G)
    t_t = float(direction.d @ inverse_pd(G) @ U)
    t_i = U / np.sqrt(np.diag(G))
    return StatVector(proj.t_c, t_t, t_i, direction)


def stats_batch(U, G):
    """Rows ``(t_c, t_t, t_1..t_k)`` for a stack of ``(U, G)``.

    ``G`` may be one shared matrix or a ``(B, k, k)`` stack.
    """
    U = np.atleast_2d(U)
    if G.ndim == 2:
        _, t_c = project_orthant_batch(U, G)
        direction = maximin_direction(G)
        t_t = U @ (inverse_pd(G) @ direction.d)
        t_i = U / np.sqrt(np.diag(G))
    else:
        _, t_c = project_orthant_batch(U, G)
        d, Q = maximin_batch(G)
        t_t = np.einsum("bi,bij,bj->b", d, Q, U)
        t_i = U / np.sqrt(np.diagonal(G, axis1=1, axis2=2))
    return np.column_stack([t_c, t_t, t_i])


def _scored_stats(scorer, shocks):
    U, G, ok = scorer.scores(shocks)
    if isinstance(G, tuple):
        sigma2, C = G
        # stats(U, s C) == stats(U / sqrt(s), C) for every column
        scaled = U / np.sqrt(np.where(ok, sigma2, 1.0))[:, None]
        return stats_batch(scaled, C), ok
    G = np.where(ok[:, None, None], G, np.eye(G.shape[1]))
    return stats_batch(U, G), ok


def pool_rank_pvalues(stats):
    """Self-inclusive upper-tail rank p-values within each column."""
    B = stats.shape[0]
    out = np.empty_like(stats, dtype=float)
    for j in range(stats.shape[1]):
        col = stats[:, j]
        srt = np.sort(col)
        out[:, j] = (B - np.searchsorted(srt, col, side="left")) / B
    return out


def rank_pvalue(pool_column, observed):
    pool_column = np.asarray(pool_column, dtype=float)
    return float(np.count_nonzero(pool_column >= observed)) / pool_column.shape[0]


def _block_stats(scorer, fit, rng, b0, n):
    shocks = bootstrap_shocks(fit, n, rng.child(b0 // BLOCK))
    return _scored_stats(scorer, shocks)


def _run_blocks(args):
    data, fit, rng, blocks, covariance = args
    scorer = BatchScorer(data, covariance)
    return [_block_stats(scorer, fit, rng, b0, n) for b0, n in blocks]


def build_pool(data, fit, B, rng, workers=1, covariance="classical"):
    """Bootstrap pool of ``B`` statistic rows under the fitted null.

    Draws are generated in fixed blocks of ``BLOCK`` indices, block ``j``
    using substream ``rng.child(j)``; blocks may run on separate processes
    without changing the result. A draw whose covariance fails the PD test is
    redrawn from its own substream, up to ``MAX_ATTEMPTS`` times.
    ``covariance`` selects the score covariance estimator, as in
    :func:`~minp.models.score_pack`.
    """
    if B < 1:
        raise ValueError("B must be positive")
    blocks = [(b0, min(BLOCK, B - b0)) for b0 in range(0, B, BLOCK)]
    pool_rng = rng.child(0)
    if workers > 1 and len(blocks) > 1:
        chunks = [blocks[i::workers] for i in range(workers)]
        ctx = multiprocessing.get_context("fork")
        with ProcessPoolExecutor(max_workers=workers, mp_context=ctx) as ex:
            parts = list(ex.map(_run_blocks, [(data, fit, pool_rng, c, covariance) for c in chunks]))
        by_start = {}
        for c, res in zip(chunks, parts):
            for (b0, _), r in zip(c, res):
                by_start[b0] = r
        results = [by_start[b0] for b0, _ in blocks]
        scorer = BatchScorer(data, covariance)
    else:
        scorer = BatchScorer(data, covariance)
        results = [_block_stats(scorer, fit, pool_rng, b0, n) for b0, n in blocks]
    stats = np.vstack([r[0] for r in results])
    ok = np.concatenate([r[1] for r in results])
    failures = int(np.count_nonzero(~ok))
    redraws = 0
    redraw_rng = rng.child(1)
    for b in np.flatnonzero(~ok):
        for attempt in range(MAX_ATTEMPTS):
            redraws += 1
            shocks = bootstrap_shocks(fit, 1, redraw_rng.child(int(b)).child(attempt))
            row, good = _scored_stats(scorer, shocks)
            if good[0]:
                stats[b] = row[0]
                ok[b] = True
                break
    if failures > MAX_FAILURE_RATE * B or not ok.all():
        raise BootstrapDegenerate(failures, B + redraws)
    return BootstrapPool(stats, pool_rank_pvalues(stats), redraws, failures)


def pool_from_stats(stats):
    stats = np.asarray(stats, dtype=float)
    return BootstrapPool(stats, pool_rank_pvalues(stats))


def minp_stat(p_g, p_i, variant):
    variant = MinPVariant.parse(variant)
    p_i = np.asarray(p_i, dtype=float)
    if variant is MinPVariant.S:
        if p_g is not None:
            raise ArityMismatch("MinP-s takes no global p-value")
        return float(p_i.min())
    if p_g is None:
        raise ArityMismatch(f"MinP-{variant.value} needs a global p-value")
    return float(min(p_g, p_i.min()))


def _columns(k, subset):
    """Pool columns for a subset: 'S'/'SC'/'ST' variants or index sets."""
    if isinstance(subset, (MinPVariant, str)):
        variant = MinPVariant.parse(subset)
        cols = list(range(2, k + 2))
        if variant is MinPVariant.SC:
            cols = [0] + cols
        elif variant is MinPVariant.ST:
            cols = [1] + cols
        return cols
    cols = [2 + int(i) for i in subset]
    if not cols:
        raise ValueError("subset must be non-empty")
    return cols


def order_statistic(minima, alpha):
    B = len(minima)
    r = math.floor(alpha * B + 1e-9)
    if r == 0:
        return 0.0
    return float(np.partition(np.asarray(minima, dtype=float), r - 1)[r - 1])


def critical_value(pool, subset, alpha):
    """alpha-quantile of per-draw minimum pool p-values over ``subset``.

    ``subset`` is either a :class:`MinPVariant` (the global statistic, which
    for SC/ST also admits the cone or t column) or a collection of 0-based
    hypothesis indices. No resampling: every subset reads the same pool.
    """
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    cols = _columns(pool.k, subset)
    minima = pool.pool_pvalues[:, cols].min(axis=1)
    return order_statistic(minima, alpha)


def observed_pvalues(pool, observed):
    row = observed.row() if isinstance(observed, StatVector) else np.asarray(observed)
    if row.shape[0] != pool.stats.shape[1]:
        raise ArityMismatch("observed statistics and pool disagree on k")
    return np.array([rank_pvalue(pool.stats[:, j], row[j]) for j in range(row.shape[0])])


def _rejects(p, c):
    return bool(c > 0 and p <= c)


def global_test(pool, observed, variant, alpha):
    variant = MinPVariant.parse(variant)
    p = observed_pvalues(pool, observed)
    p_g = {MinPVariant.S: None, MinPVariant.SC: p[0], MinPVariant.ST: p[1]}[variant]
    p_m = minp_stat(p_g, p[2:], variant)
    c_m = critical_value(pool, variant, alpha)
    return GlobalTestResult(variant, p_m, c_m, _rejects(p_m, c_m), p)


def stepdown_trace(p_i, global_reject, c_global, subset_critical):
    """Stepdown over individual p-values.

    ``subset_critical(K)`` returns the critical value for the remaining
    index set ``K`` (a tuple of 0-based indices); it is consulted from the
    second hypothesis on.
    """
    p_i = np.asarray(p_i, dtype=float)
    order = tuple(int(i) for i in np.argsort(p_i, kind="stable"))
    if not global_reject:
        return StepdownResult(order, (), frozenset(), False)
    steps = []
    rejected = []
    for pos, idx in enumerate(order):
        crit = c_global if pos == 0 else subset_critical(tuple(order[pos:]))
        reject = _rejects(p_i[idx], crit)
        steps.append(Step(idx, float(p_i[idx]), float(crit), reject))
        if not reject:
            break
        rejected.append(idx)
    return StepdownResult(order, tuple(steps), frozenset(rejected), True)


def stepdown(pool, global_result, variant, alpha):
    variant = MinPVariant.parse(variant)
    if global_result.variant is not variant:
        raise ValueError("global result was computed for a different variant")
    return stepdown_trace(
        global_result.p_i,
        global_result.reject,
        global_result.c_m,
        lambda K: critical_value(pool, K, alpha),
    )
