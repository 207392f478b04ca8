"""Data-generating processes and the Monte Carlo replication loop.

Replication ``r`` of a study owns ``RngStream(seed, r)`` and derives three
substreams from it: 0 for the sample, 1 for the bootstrap pool, 2 for the
chi-bar weights of the reference test. Results are therefore a function of
the configuration alone, whatever the worker count.
"""

from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
import io
import csv
import math
import multiprocessing
import time

import numpy as np
from scipy.stats import norm

from minp.cone import chibar_survival, chibar_weights
from minp.errors import ConfigInvalid, ExplosiveVariance, MinPError
from minp.inference import (
    MinPVariant,
    build_pool,
    compute_stats,
    critical_value,
    global_test,
    stepdown,
)
from minp.linalg import RngStream, cholesky, mvn_draw
from minp.models import COVARIANCES, Dataset, fit_restricted, score_pack

CHIBAR_DRAWS = 100_000
VARIANT_ORDER = (MinPVariant.SC, MinPVariant.ST, MinPVariant.S)


@dataclass(frozen=True)
class DgpSpec:
    family: str
    T: int
    gamma_true: tuple
    error_dist: str = "normal"  # "normal" or "t<df>", e.g. "t5"
    rho: float = 0.0
    local_scaling: bool = False
    beta: tuple = (1.0, 1.0)
    omega: float = 1.0
    sigma_eps2: float = 1.0
    xi: tuple = None
    burn_in: int = 1000

    def __post_init__(self):
        object.__setattr__(self, "gamma_true", tuple(float(g) for g in self.gamma_true))
        object.__setattr__(self, "beta", tuple(float(b) for b in self.beta))
        if self.xi is None:
            object.__setattr__(self, "xi", (1.0,) * self.k)
        else:
            object.__setattr__(self, "xi", tuple(float(v) for v in self.xi))
        self.validate()

    @property
    def k(self):
        return len(self.gamma_true)

    @property
    def gamma(self):
        g = np.array(self.gamma_true)
        return g / math.sqrt(self.T) if self.local_scaling else g

    @property
    def df(self):
        if self.error_dist == "normal":
            return None
        return float(self.error_dist[1:])

    def validate(self):
        if self.family not in ("linear", "arch", "rc"):
            raise ConfigInvalid("family", f"unknown family {self.family!r}")
        if self.k < 1:
            raise ConfigInvalid("gamma_true", "need at least one tested parameter")
        if any(g < 0 for g in self.gamma_true):
            raise ConfigInvalid("gamma_true", "entries must be non-negative")
        if self.T < 10:
            raise ConfigInvalid("T", "sample size too small")
        if self.error_dist != "normal":
            try:
                df = float(self.error_dist[1:]) if self.error_dist.startswith("t") else None
            except ValueError:
                df = None
            if df is None or df <= 2:
                raise ConfigInvalid("error_dist", "use 'normal' or 't<df>' with df > 2")
        if len(self.beta) != 2:
            raise ConfigInvalid("beta", "expected (slope, intercept)")
        if self.family == "linear" and not (1 + self.k * self.rho > 0 and self.rho < 1):
            raise ConfigInvalid("rho", f"rho={self.rho} gives no valid covariance for k={self.k}")
        if self.family == "arch" and self.gamma.sum() >= 1:
            raise ExplosiveVariance(float(self.gamma.sum()))
        if self.omega <= 0 or self.sigma_eps2 <= 0:
            raise ConfigInvalid("omega", "variance parameters must be positive")
        if len(self.xi) != self.k:
            raise ConfigInvalid("xi", "length must match gamma_true")


@dataclass(frozen=True)
class McConfig:
    spec: DgpSpec
    replications: int
    B: int = 999
    alpha: float = 0.05
    seed: int = 20240101
    variants: tuple = VARIANT_ORDER
    include_reference: bool = True
    covariance: str = "classical"

    def __post_init__(self):
        object.__setattr__(
            self, "variants", tuple(MinPVariant.parse(v) for v in self.variants)
        )
        if self.covariance not in COVARIANCES:
            raise ConfigInvalid("covariance", f"expected one of {COVARIANCES}")
        if self.replications < 1:
            raise ConfigInvalid("replications", "must be at least 1")
        if self.B < 99:
            raise ConfigInvalid("B", "must be at least 99")
        if not 0 < self.alpha < 1:
            raise ConfigInvalid("alpha", "must lie in (0, 1)")

    @classmethod
    def from_dict(cls, d):
        if "seed" not in d:
            raise ConfigInvalid("seed", "a seed is required")
        try:
            spec = d["spec"]
            spec = spec if isinstance(spec, DgpSpec) else DgpSpec(**spec)
        except KeyError as exc:
            raise ConfigInvalid(str(exc.args[0]), "missing field") from None
        except TypeError as exc:
            raise ConfigInvalid("spec", str(exc)) from None
        known = {"replications", "B", "alpha", "seed", "variants", "include_reference", "covariance"}
        unknown = set(d) - known - {"spec"}
        if unknown:
            raise ConfigInvalid(sorted(unknown)[0], "unknown field")
        if "replications" not in d:
            raise ConfigInvalid("replications", "missing field")
        kwargs = {key: d[key] for key in known if key in d}
        try:
            if "variants" in kwargs:
                kwargs["variants"] = tuple(MinPVariant.parse(v) for v in kwargs["variants"])
        except ValueError:
            raise ConfigInvalid("variants", "expected a subset of s, sc, st") from None
        return cls(spec=spec, **kwargs)


def standardized_errors(spec, gen, size):
    if spec.df is None:
        return gen.standard_normal(size)
    df = spec.df
    return gen.standard_t(df, size) / math.sqrt(df / (df - 2))


def linear_covariance(k, rho):
    """Covariance of ``(z_1..z_k, x^d)`` whose inverse is an equicorrelation matrix."""
    n = k + 1
    return (np.eye(n) - rho / (1 + k * rho) * np.ones((n, n))) / (1 - rho)


def gen_linear(spec, rng):
    gen = rng.generator() if isinstance(rng, RngStream) else rng
    k, T = spec.k, spec.T
    chol = cholesky(linear_covariance(k, spec.rho))
    draws = mvn_draw(chol, gen, size=T)
    Z, xd = draws[:, :k], draws[:, k]
    X = np.column_stack([xd, np.ones(T)])
    eps = standardized_errors(spec, gen, T)
    y = Z @ spec.gamma + X @ np.array(spec.beta) + eps
    return Dataset(y, Z, X, "linear")


def ar1_regressor(gen, T, burn_in, phi=0.8, sd=2.0):
    x = gen.standard_normal() * sd / math.sqrt(1 - phi**2)
    e = gen.standard_normal(burn_in + T) * sd
    out = np.empty(burn_in + T)
    for n in range(burn_in + T):
        x = phi * x + e[n]
        out[n] = x
    return out[burn_in:]


def gen_arch(spec, rng):
    gen = rng.generator() if isinstance(rng, RngStream) else rng
    k, T, burn = spec.k, spec.T, spec.burn_in
    alpha = spec.gamma
    xd = ar1_regressor(gen, T, burn)
    u = standardized_errors(spec, gen, burn + T)
    eps = np.zeros(burn + T + k)
    for n in range(burn + T):
        past = eps[n : n + k][::-1]  # eps_{n-1}, ..., eps_{n-k}
        eps[n + k] = math.sqrt(spec.omega + alpha @ past**2) * u[n]
    eps = eps[k + burn :]
    X = np.column_stack([xd, np.ones(T)])
    y = X @ np.array(spec.beta) + eps
    return Dataset(y, np.zeros((T, 0)), X, "arch", lags=k)


def gen_rc(spec, rng):
    gen = rng.generator() if isinstance(rng, RngStream) else rng
    k, T = spec.k, spec.T
    xd = gen.standard_normal(T) * 2.0
    R = np.full((k, k), 0.2) + 0.8 * np.eye(k)
    Z = mvn_draw(cholesky(R), gen, size=T)
    eta = gen.standard_normal((T, k)) * np.sqrt(spec.gamma)
    eps = standardized_errors(spec, gen, T) * math.sqrt(spec.sigma_eps2)
    X = np.column_stack([xd, np.ones(T)])
    y = np.sum(Z * (np.array(spec.xi) + eta), axis=1) + X @ np.array(spec.beta) + eps
    return Dataset(y, Z, X, "rc")


GENERATORS = {"linear": gen_linear, "arch": gen_arch, "rc": gen_rc}


def generate(spec, rng):
    return GENERATORS[spec.family](spec, rng)


def reference_tests(pack, stats, alpha, rng, n_draws=CHIBAR_DRAWS):
    """Classical chi-bar-squared and one-sided t tests at level ``alpha``."""
    weights = chibar_weights(pack.G, n_draws, rng)
    chibar_reject = chibar_survival(stats.t_c, weights) <= alpha
    t_reject = stats.t_t > norm.ppf(1 - alpha)
    return bool(chibar_reject), bool(t_reject)


@dataclass(frozen=True)
class ReplicationRecord:
    index: int
    reject: dict
    K_hat: dict
    chibar: bool = None
    t: bool = None
    redraws: int = 0
    checks: dict = field(default_factory=dict)
    seconds: float = 0.0


def structural_checks(pool, results, steps, alpha):
    """Pool-level invariants that must hold on every replication."""
    c1 = critical_value(pool, MinPVariant.S, alpha)
    checks = {
        "c_sc_le_c_s": critical_value(pool, MinPVariant.SC, alpha) <= c1,
        "c_st_le_c_s": critical_value(pool, MinPVariant.ST, alpha) <= c1,
    }
    s = results.get(MinPVariant.S)
    if s is not None:
        first = steps[MinPVariant.S].steps
        checks["consonance"] = (not s.reject) or (bool(first) and first[0].reject)
    led = [v for v in steps if steps[v].steps and steps[v].steps[0].reject]
    if len(led) == len(steps) == 3:
        checks["agreement"] = len({steps[v].K_hat for v in led}) == 1
    return checks


def run_replication(config, r):
    start = time.perf_counter()
    spec = config.spec
    rng = RngStream(config.seed, r)
    data = generate(spec, rng.child(0))
    fit = fit_restricted(data)
    pack = score_pack(data, fit, config.covariance)
    obs = compute_stats(pack)
    pool = build_pool(data, fit, config.B, rng.child(1), covariance=config.covariance)
    variants = set(config.variants) | {MinPVariant.S, MinPVariant.SC, MinPVariant.ST}
    results = {v: global_test(pool, obs, v, config.alpha) for v in variants}
    steps = {v: stepdown(pool, results[v], v, config.alpha) for v in variants}
    checks = structural_checks(pool, results, steps, config.alpha)
    chibar = t = None
    if config.include_reference:
        chibar, t = reference_tests(pack, obs, config.alpha, rng.child(2))
    return ReplicationRecord(
        index=r,
        reject={v.value: bool(results[v].reject) for v in config.variants},
        K_hat={v.value: tuple(sorted(steps[v].K_hat)) for v in config.variants},
        chibar=chibar,
        t=t,
        redraws=pool.redraws,
        checks=checks,
        seconds=time.perf_counter() - start,
    )


def _run_range(args):
    config, indices = args
    out = []
    for r in indices:
        try:
            out.append(run_replication(config, r))
        except MinPError as exc:
            exc.replication = r
            exc.args = (f"replication {r}: {exc}",)
            raise
    return out


@dataclass(frozen=True)
class VariantRates:
    reject_H0: float
    fwer: float
    per_hypothesis: tuple


@dataclass(frozen=True)
class McResult:
    config: McConfig
    replications: int
    variants: dict
    chibar: float = None
    t: float = None
    redraws: int = 0
    mean_seconds: float = 0.0
    check_failures: dict = field(default_factory=dict)
    records: tuple = field(default=(), repr=False, compare=False)

    def mc_se(self, rate):
        return math.sqrt(rate * (1 - rate) / self.replications)


def aggregate(config, records):
    R = len(records)
    zero_set = {i for i, g in enumerate(config.spec.gamma_true) if g == 0}
    k = config.spec.k
    variants = {}
    for v in config.variants:
        rej = sum(rec.reject[v.value] for rec in records) / R
        fw = sum(bool(zero_set & set(rec.K_hat[v.value])) for rec in records) / R
        per = tuple(sum(i in rec.K_hat[v.value] for rec in records) / R for i in range(k))
        variants[v.value] = VariantRates(rej, fw if zero_set else 0.0, per)
    chibar = t = None
    if config.include_reference:
        chibar = sum(rec.chibar for rec in records) / R
        t = sum(rec.t for rec in records) / R
    failures = {}
    for rec in records:
        for name, ok in rec.checks.items():
            failures[name] = failures.get(name, 0) + (not ok)
    return McResult(
        config=config,
        replications=R,
        variants=variants,
        chibar=chibar,
        t=t,
        redraws=sum(rec.redraws for rec in records),
        mean_seconds=sum(rec.seconds for rec in records) / R,
        check_failures=failures,
        records=tuple(records),
    )


def run_study(config, workers=1, progress=None):
    """Run all replications and aggregate.

    ``workers > 1`` spreads contiguous replication ranges over processes;
    records are re-sorted by index, so the outcome does not depend on it.
    """
    R = config.replications
    if workers <= 1:
        records = []
        for r in range(R):
            records.append(_run_range((config, [r]))[0])
            if progress:
                progress(r + 1, R)
    else:
        size = max(1, math.ceil(R / (workers * 4)))
        ranges = [list(range(a, min(a + size, R))) for a in range(0, R, size)]
        ctx = multiprocessing.get_context("fork")
        records = []
        with ProcessPoolExecutor(max_workers=workers, mp_context=ctx) as ex:
            for part in ex.map(_run_range, [(config, rg) for rg in ranges]):
                records.extend(part)
                if progress:
                    progress(len(records), R)
        records.sort(key=lambda rec: rec.index)
    return aggregate(config, records)


def _pct(rate):
    return f"{100 * rate:.1f}"


def table_header(config):
    cols = ["gamma", "T"]
    for v in [v for v in VARIANT_ORDER if v in config.variants]:
        name = f"MinP-{v.value}"
        cols += [f"{name} H0", f"{name} FWER"]
        cols += [f"{name} H0{i + 1}" for i in range(config.spec.k)]
    if config.include_reference:
        cols += ["chibar H0", "t H0"]
    return cols


def table_row(result):
    config = result.config
    gamma = "(" + " ".join(f"{g:g}" for g in config.spec.gamma_true) + ")"
    row = [gamma, str(config.spec.T)]
    for v in [v for v in VARIANT_ORDER if v in config.variants]:
        rates = result.variants[v.value]
        row += [_pct(rates.reject_H0), _pct(rates.fwer)]
        row += [_pct(p) for p in rates.per_hypothesis]
    if config.include_reference:
        row += [_pct(result.chibar), _pct(result.t)]
    return row


def emit_table(results, format="csv"):
    """Render one row per study in the standard column layout (percentages)."""
    if isinstance(results, McResult):
        results = [results]
    if not results:
        return ""
    header = table_header(results[0].config)
    rows = [] if not results[0].config.variants else [table_row(r) for r in results]
    if format == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)
        return buf.getvalue()
    if format in ("md", "markdown"):
        lines = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
        lines += ["| " + " | ".join(r) + " |" for r in rows]
        return "\n".join(lines) + "\n"
    raise ValueError(f"unknown table format {format!r}")


def standard_errors(result):
    """Monte Carlo standard errors for every cell of :func:`table_row`."""
    out = {}
    for v, rates in result.variants.items():
        out[f"MinP-{v} H0"] = result.mc_se(rates.reject_H0)
        out[f"MinP-{v} FWER"] = result.mc_se(rates.fwer)
        for i, p in enumerate(rates.per_hypothesis):
            out[f"MinP-{v} H0{i + 1}"] = result.mc_se(p)
    if result.chibar is not None:
        out["chibar H0"] = result.mc_se(result.chibar)
        out["t H0"] = result.mc_se(result.t)
    return out


def config_dict(config):
    d = asdict(config)
    d["variants"] = [v.value for v in config.variants]
    return d
