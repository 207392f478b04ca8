"""Offline recipe: every simulation table, cell by cell.

The full grid is roughly 180 cells of 2000 replications with B = 999; expect
hours even on many cores. Finished cells are cached as one CSV line each under
``--out``, so the run can be interrupted and resumed. ``--list`` prints the
grid, ``--only`` restricts it to tables whose name contains a substring, and
``--reps``/``--boot`` shrink it for a quick smoke pass.

Example::

    python3 scripts/full_tables.py --out results --workers 8
    python3 scripts/full_tables.py --only arch2 --reps 200 --boot 199
"""

import argparse
import csv
import io
import os
from pathlib import Path
import sys
import time

from minp.mcstudy import DgpSpec, McConfig, emit_table, run_study

SEED = 20240101


def _grid(family, rows, Ts, dists, **kw):
    return [(family, g, T, dist, kw) for dist in dists for g in rows for T in Ts]


def arch6_rows(scale):
    rows = []
    for k1 in (1, 2, 3, 6):
        rows.append(tuple([scale / k1] * k1 + [0.0] * (6 - k1)))
    return rows


TABLES = {
    **{
        f"linear-normal-rho{rho:+.2f}": _grid(
            "linear", [(0, 0), (0.3, 0), (0.15, 0.15)], (60, 100), ["normal"], rho=rho
        )
        for rho in (-0.45, 0.0, 0.45)
    },
    **{
        f"linear-t5-rho{rho:+.2f}": _grid(
            "linear", [(0, 0), (0.6, 0), (0.4, 0.4)], (60, 100), ["t5"], rho=rho
        )
        for rho in (-0.45, 0.0, 0.45)
    },
    "arch2": _grid(
        "arch",
        [(0, 0), (0.6, 0), (0, 0.6), (0.5, 0.3), (0.3, 0.5), (0.4, 0.4)],
        (60, 100),
        ["normal", "t5"],
    ),
    "arch4": _grid(
        "arch",
        [(0, 0, 0, 0), (0.6, 0, 0, 0), (0, 0.6, 0, 0), (0, 0, 0, 0.6),
         (0.4, 0.2, 0, 0), (0, 0.2, 0, 0.6), (0.3, 0.2, 0.1, 0.05)],
        (60, 100),
        ["normal", "t5"],
    ),
    "arch4-local": _grid(
        "arch",
        [(5, 0, 0, 0), (0, 5, 0, 0), (0, 0, 0, 5), (3, 1.5, 0, 0), (0, 1.5, 0, 5), (2.5, 1.5, 0.7, 0.4)],
        (60, 100),
        ["normal", "t5"],
        local_scaling=True,
    ),
    "arch6": _grid("arch", [(0,) * 6] + arch6_rows(0.95), (60, 100), ["normal", "t10"]),
    "arch6-local": _grid("arch", arch6_rows(7.0), (60, 100), ["normal", "t10"], local_scaling=True),
    "rc2": _grid("rc", [(0, 0), (0.5, 0), (0.5, 0.5)], (100, 200), ["normal", "t5"]),
    "rc3-normal": _grid("rc", [(0, 0, 0), (0.5, 0, 0), (0.5, 0.5, 0), (0.4, 0.4, 0.4)], (100, 200), ["normal"]),
    "rc3-t5": _grid("rc", [(0, 0, 0), (0.6, 0, 0), (0.5, 0.5, 0), (0.4, 0.4, 0.4)], (100, 200), ["t5"]),
}


def cell_key(family, gamma, T, dist, kw):
    extra = "".join(f"-{k}{v}" for k, v in sorted(kw.items()))
    return f"{family}-{dist}-T{T}-" + "_".join(f"{g:g}" for g in gamma) + extra


def run_cell(cell, args):
    family, gamma, T, dist, kw = cell
    spec = DgpSpec(family, T, gamma, error_dist=dist, **kw)
    cfg = McConfig(spec, args.reps, B=args.boot, seed=args.seed)
    res = run_study(cfg, workers=args.workers)
    header, row = emit_table(res).strip().split("\n")
    return header, row


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    p.add_argument("--out", default="results")
    p.add_argument("--only", default="")
    p.add_argument("--reps", type=int, default=2000)
    p.add_argument("--boot", type=int, default=999)
    p.add_argument("--seed", type=int, default=SEED)
    p.add_argument("--workers", type=int, default=os.cpu_count() or 1)
    p.add_argument("--list", action="store_true")
    args = p.parse_args(argv)

    tables = {name: cells for name, cells in TABLES.items() if args.only in name}
    if args.list:
        for name, cells in tables.items():
            print(f"{name}: {len(cells)} cells")
            for c in cells:
                print("   ", cell_key(*c))
        return 0

    out = Path(args.out)
    (out / "cells").mkdir(parents=True, exist_ok=True)
    for name, cells in tables.items():
        header, rows = None, []
        for cell in cells:
            key = cell_key(*cell)
            path = out / "cells" / f"{key}-R{args.reps}-B{args.boot}-s{args.seed}.csv"
            if path.exists():
                header, row = path.read_text().strip().split("\n")
            else:
                start = time.perf_counter()
                header, row = run_cell(cell, args)
                path.write_text(header + "\n" + row + "\n")
                print(f"{name} {key}: {time.perf_counter() - start:.0f} s", flush=True)
            rows.append([cell[3]] + next(csv.reader([row])))
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["errors"] + next(csv.reader([header])))
        writer.writerows(rows)
        (out / f"{name}.csv").write_text(buf.getvalue())
        print(f"wrote {out / name}.csv")
    return 0


if __name__ == "__main__":
    sys.exit(main())
