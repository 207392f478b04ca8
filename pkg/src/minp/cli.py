"""Command-line front end.

``minp test`` runs the one-sided score tests on a CSV file and writes a JSON
report, ``minp simulate`` runs Monte Carlo studies from a JSON config, and
``minp project`` / ``minp weights`` expose the cone projection and chi-bar
weights for debugging. Exit codes: 0 on success, 2 on data or configuration
errors, 3 on numerical failures; errors are also written to stderr as JSON.
"""

import argparse
import csv
from dataclasses import asdict, dataclass, field
import json
import math
import os
from pathlib import Path
import sys
import time

import numpy as np

from minp.cone import chibar_weights, project_orthant
from minp.errors import (
    ConfigInvalid,
    DataError,
    MinPError,
    MissingColumn,
    NonNumericCell,
    NumericalError,
    TooFewRows,
)
from minp.inference import (
    MinPVariant,
    build_pool,
    compute_stats,
    global_test,
    stepdown,
)
from minp.linalg import RngStream, as_sym
from minp.mcstudy import VARIANT_ORDER, McConfig, emit_table, run_study, standard_errors
from minp.models import Dataset, fit_restricted, score_pack

DEFAULT_SEED = 20240101
EXIT_OK, EXIT_DATA, EXIT_NUMERICAL = 0, 2, 3


@dataclass(frozen=True)
class TestRequest:
    input: str
    model: str
    k: int
    output: str = None
    alpha: float = 0.05
    B: int = 999
    seed: int = DEFAULT_SEED
    variants: tuple = VARIANT_ORDER
    stepdown: bool = False
    intercept: bool = True
    workers: int = 1
    covariance: str = "classical"

    __test__ = False  # not a pytest class

    def __post_init__(self):
        object.__setattr__(self, "variants", tuple(MinPVariant.parse(v) for v in self.variants))
        if self.model not in ("linear", "arch", "rc"):
            raise ConfigInvalid("model", f"unknown model family {self.model!r}")
        if self.k < 1:
            raise ConfigInvalid("k", "must be at least 1")
        if not 0 < self.alpha < 1:
            raise ConfigInvalid("alpha", "must lie in (0, 1)")
        if self.B < 1:
            raise ConfigInvalid("B", "must be positive")

    def to_dict(self):
        d = asdict(self)
        d["variants"] = [v.value for v in self.variants]
        return d


@dataclass(frozen=True)
class TestReport:
    request: dict
    fit: dict
    statistics: dict
    pvalues: dict
    global_: dict
    stepdown: dict = None
    diagnostics: dict = field(default_factory=dict)

    __test__ = False

    def to_dict(self):
        d = asdict(self)
        d["global"] = d.pop("global_")
        keys = ("request", "fit", "statistics", "pvalues", "global", "stepdown", "diagnostics")
        return {key: d[key] for key in keys}

    def to_json(self):
        # floats go through repr, so probabilities survive exactly
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["global_"] = d.pop("global")
        return cls(**d)

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


def _float(text, row, column):
    try:
        value = float(text)
    except ValueError:
        raise NonNumericCell(row, column, text) from None
    if not math.isfinite(value):
        raise NonNumericCell(row, column, text)
    return value


def parse_csv(path, family, k, intercept=True):
    """Read a dataset by column name.

    Linear and RC files need ``y`` and ``z1..zk``; every other column is a
    free covariate. ARCH files need ``y``; every other column is a mean-model
    covariate and ``k`` is the lag count. An intercept is appended unless
    disabled or a ``const`` column is present. Data rows are numbered from 1.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise MissingColumn("y") from None
        rows = [r for r in reader if any(cell.strip() for cell in r)]
    tested = [] if family == "arch" else [f"z{i}" for i in range(1, k + 1)]
    missing = [name for name in ["y"] + tested if name not in header]
    if missing:
        raise MissingColumn(*missing)
    free = [h for h in header if h != "y" and h not in tested]
    values = np.empty((len(rows), len(header)))
    for r, row in enumerate(rows, start=1):
        if len(row) != len(header):
            raise DataError(f"row {r} has {len(row)} fields, header has {len(header)}")
        for j, cell in enumerate(row):
            values[r - 1, j] = _float(cell.strip(), r, header[j])
    col = {h: values[:, j] for j, h in enumerate(header)}
    T = len(rows)
    X = [col[h] for h in free]
    if intercept and "const" not in header:
        X.append(np.ones(T))
        free = free + ["const"]
    m = len(X)
    if T <= m + k + 1:
        raise TooFewRows(T, m + k + 1)
    Z = np.column_stack([col[h] for h in tested]) if tested else np.zeros((T, 0))
    X = np.column_stack(X) if X else np.zeros((T, 0))
    data = Dataset(col["y"], Z, X, family, lags=k if family == "arch" else 0)
    return data, free


def _steps_dict(result):
    # hypotheses are reported 1-based, matching the z1..zk column names
    return {
        "order": [i + 1 for i in result.order],
        "steps": [
            {
                "hypothesis": s.index + 1,
                "pvalue": s.pvalue,
                "critical_value": s.critical_value,
                "reject": s.reject,
            }
            for s in result.steps
        ],
        "K_hat": sorted(i + 1 for i in result.K_hat),
        "global_reject": result.global_reject,
    }


def cmd_test(request):
    start = time.perf_counter()
    data, free_names = parse_csv(request.input, request.model, request.k, request.intercept)
    fit = fit_restricted(data)
    pack = score_pack(data, fit, request.covariance)
    obs = compute_stats(pack)
    rng = RngStream(request.seed, 0)
    pool = build_pool(
        data, fit, request.B, rng.child(1), workers=request.workers, covariance=request.covariance
    )
    results = {v: global_test(pool, obs, v, request.alpha) for v in request.variants}
    steps = None
    if request.stepdown:
        steps = {
            v.value: _steps_dict(stepdown(pool, results[v], v, request.alpha))
            for v in request.variants
        }
    p = results[request.variants[0]].observed_pvalues
    regressors = ([f"z{i}" for i in range(1, data.k + 1)] if data.family == "rc" else [])
    return TestReport(
        request=request.to_dict(),
        fit={
            "regressors": regressors + free_names,
            "coefficients": fit.psi_hat.tolist(),
            "sigma2": fit.sigma2_hat,
            "effective_range": list(fit.effective_range),
            "T": data.T,
        },
        statistics={
            "U": pack.U.tolist(),
            "G": pack.G.tolist(),
            "t_c": obs.t_c,
            "t_t": obs.t_t,
            "t_i": obs.t_i.tolist(),
            "direction": obs.direction.d.tolist(),
        },
        pvalues={"p_c": float(p[0]), "p_t": float(p[1]), "p_i": p[2:].tolist()},
        global_={
            v.value: {"p_m": r.p_m, "c_m": r.c_m, "reject": bool(r.reject)}
            for v, r in results.items()
        },
        stepdown=steps,
        diagnostics={
            "B": pool.B,
            "redraws": pool.redraws,
            "failed_draws": pool.failures,
            "seconds": time.perf_counter() - start,
        },
    )


def load_studies(path):
    """Read a study config: one McConfig object, a list of them, or one
    object whose ``spec`` is a list (one study per spec)."""
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigInvalid("config", f"invalid JSON: {exc}") from None
    docs = doc if isinstance(doc, list) else [doc]
    configs = []
    for d in docs:
        if not isinstance(d, dict):
            raise ConfigInvalid("config", "expected a JSON object")
        specs = d.get("spec")
        if isinstance(specs, list):
            configs += [McConfig.from_dict({**d, "spec": s}) for s in specs]
        else:
            configs.append(McConfig.from_dict(d))
    return configs


def cmd_simulate(config_path, out_path, format="csv", workers=1, stream=None):
    stream = stream or sys.stdout
    results = [run_study(c, workers=workers) for c in load_studies(config_path)]
    text = emit_table(results, format)
    Path(out_path).write_text(text, encoding="utf-8")
    for res in results:
        spec = res.config.spec
        print(f"# {spec.family} gamma={spec.gamma_true} T={spec.T}: Monte Carlo standard errors (pp)", file=stream)
        for name, se in standard_errors(res).items():
            print(f"{name}: {100 * se:.2f}", file=stream)
    return results


def parse_matrix(text):
    """``"a,b;b,c"`` inline, or a path to a comma-separated matrix file."""
    if os.path.exists(text):
        rows = [ln for ln in Path(text).read_text(encoding="utf-8").splitlines() if ln.strip()]
    else:
        rows = text.split(";")
    try:
        M = np.array([[float(x) for x in r.split(",")] for r in rows])
    except ValueError:
        raise DataError(f"cannot parse matrix {text!r}") from None
    try:
        return as_sym(M)
    except ValueError as exc:
        raise DataError(str(exc)) from None


def parse_vector(text):
    try:
        return np.array([float(x) for x in text.split(",")])
    except ValueError:
        raise DataError(f"cannot parse vector {text!r}") from None


def cmd_project(cov, u):
    G, U = parse_matrix(cov), parse_vector(u)
    if U.shape[0] != G.shape[0]:
        raise DataError(f"u has length {U.shape[0]}, covariance is {G.shape[0]}x{G.shape[0]}")
    proj = project_orthant(U, G)
    return {
        "u_bar": proj.u_bar.tolist(),
        "t_c": proj.t_c,
        "active_set": [int(i) + 1 for i in proj.active_set],
        "multipliers": proj.multipliers.tolist(),
    }


def cmd_weights(cov, draws, seed):
    G = parse_matrix(cov)
    w = chibar_weights(G, draws, RngStream(seed, 0))
    return {"weights": w.w.tolist(), "draws": draws, "seed": seed}


def _error_payload(exc):
    kind = "data" if isinstance(exc, (DataError, OSError, ValueError)) else "numerical"
    payload = {"error": type(exc).__name__, "category": kind, "message": str(exc)}
    for attr in ("field", "row", "column", "names", "pivot", "replication"):
        if getattr(exc, attr, None) is not None:
            value = getattr(exc, attr)
            payload[attr] = list(value) if isinstance(value, tuple) else value
    return payload


def build_parser():
    parser = argparse.ArgumentParser(prog="minp", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    cores = os.cpu_count() or 1

    t = sub.add_parser("test", help="test H0: gamma = 0 against gamma >= 0 on a CSV file")
    t.add_argument("--input", required=True)
    t.add_argument("--model", required=True, choices=["linear", "arch", "rc"])
    t.add_argument("--k", required=True, type=int)
    t.add_argument("--alpha", type=float, default=0.05)
    t.add_argument("--boot", type=int, default=999, help="bootstrap repetitions B")
    t.add_argument("--seed", type=int, default=DEFAULT_SEED)
    t.add_argument("--variant", action="append", choices=["s", "sc", "st"])
    t.add_argument("--stepdown", action="store_true")
    t.add_argument("--no-intercept", action="store_true")
    t.add_argument("--output", help="report path (default: stdout)")
    t.add_argument("--workers", type=int, default=cores)
    t.add_argument(
        "--covariance",
        choices=["classical", "sandwich"],
        default="classical",
        help="score covariance for arch/rc (ignored for linear)",
    )

    s = sub.add_parser("simulate", help="run Monte Carlo studies from a JSON config")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--format", choices=["csv", "md"], default="csv")
    s.add_argument("--workers", type=int, default=cores)

    p = sub.add_parser("project", help="project a score onto the orthant")
    p.add_argument("--cov", required=True, help='"a,b;b,c" or a CSV file')
    p.add_argument("--u", required=True, help='"u1,u2"')

    w = sub.add_parser("weights", help="Monte Carlo chi-bar weights")
    w.add_argument("--cov", required=True, help='CSV file or "a,b;b,c"')
    w.add_argument("--draws", type=int, default=100_000)
    w.add_argument("--seed", type=int, default=DEFAULT_SEED)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        if args.command == "test":
            request = TestRequest(
                input=args.input,
                model=args.model,
                k=args.k,
                output=args.output,
                alpha=args.alpha,
                B=args.boot,
                seed=args.seed,
                variants=tuple(args.variant) if args.variant else VARIANT_ORDER,
                stepdown=args.stepdown,
                intercept=not args.no_intercept,
                workers=args.workers,
                covariance=args.covariance,
            )
            text = cmd_test(request).to_json()
            if args.output:
                Path(args.output).write_text(text + "\n", encoding="utf-8")
            else:
                print(text)
        elif args.command == "simulate":
            cmd_simulate(args.config, args.out, args.format, args.workers)
        elif args.command == "project":
            print(json.dumps(cmd_project(args.cov, args.u), indent=2))
        else:
            print(json.dumps(cmd_weights(args.cov, args.draws, args.seed), indent=2))
    except (DataError, OSError) as exc:
        print(json.dumps(_error_payload(exc)), file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(json.dumps(_error_payload(exc)), file=sys.stderr)
        return EXIT_NUMERICAL
    except MinPError as exc:
        print(json.dumps(_error_payload(exc)), file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
