"""Command-line front end: ``scfo run | grid | table | verify``."""

from __future__ import annotations

import argparse
import json
import sys
from collections import defaultdict
from pathlib import Path

import numpy as np

from .algorithms import ALGORITHMS, SHORT_NAMES
from .bench import (CONCAVITY_CASES, PREMATURE_RADIUS, ExperimentCell, ExperimentGrid, load_problem_config,
                    run_cell, run_grid, summarize_trace, summarize_trace_csv, write_summary_csv, write_trace_csv)
from .supervisor import IMPLEMENTATIONS
from .verify import run_checks


def _add_cell_flags(p):
    p.add_argument("--problem", default="A", help="benchmark problem A or B")
    p.add_argument("--algo", default="ideal-target", choices=ALGORITHMS + tuple(SHORT_NAMES))
    p.add_argument("--impl", default="I", choices=IMPLEMENTATIONS)
    p.add_argument("--sigma", type=float, default=0.0, help="gradient noise level")
    p.add_argument("--sigma-g", type=float, default=0.0, help="constraint noise level")
    p.add_argument("--seed", type=int, default=0, help="seed base")
    p.add_argument("--kf", type=int, default=None, help="final iteration (problem default if omitted)")
    p.add_argument("--slack-l", type=float, default=0.0, help="soft-constraint slack level")
    p.add_argument("--known", default="", help="comma-separated known elements, e.g. phi,g1,g3")
    p.add_argument("--concave", default="none", choices=sorted(CONCAVITY_CASES))
    p.add_argument("--reuse-history", action="store_true", help="relax the gain with past measurements")
    p.add_argument("--cost-change", action="store_true", help="switch to the alternate cost mid-run")


def _cell_from_args(args) -> ExperimentCell:
    known = tuple(k for k in args.known.split(",") if k)
    return ExperimentCell(problem=args.problem, algorithm=args.algo, implementation=args.impl, sigma=args.sigma,
                          sigma_g=args.sigma_g, concavity=args.concave, reuse_history=args.reuse_history,
                          cost_change=args.cost_change, slack_level=args.slack_l, known=known, k_f=args.kf)


def cmd_run(args):
    cell = _cell_from_args(args)
    trace = run_cell(cell, args.replicate, args.seed)
    out = Path(args.out) if args.out else Path(f"{cell.key}_r{args.replicate}.csv")
    out.parent.mkdir(parents=True, exist_ok=True)
    write_trace_csv(trace, out)
    s = summarize_trace(trace, g_range=cell.build()[0].g_range)
    print(f"{cell.key} L={s['L']:.4f} violations={s['violations']} "
          f"final_distance={s['final_distance']:.4g} -> {out}")
    return 0


def cmd_grid(args):
    data = load_problem_config(args.config)
    data = data.get("grid", data)
    if args.seed is not None:
        data["seed_base"] = args.seed
    grid = ExperimentGrid.from_mapping(data)
    out = Path(args.out)
    records = run_grid(grid, out / "traces", jobs=args.jobs)
    write_summary_csv(records, out / "summary.csv")
    for r in records:
        print(f"{r['key']}: median L {r['median_L']:.4f}, violations {r['violations']}, "
              f"premature {r['premature']}/{r['replicates']}")
    return 0


def _cell_key(path: Path) -> str:
    stem = path.stem
    head, _, tail = stem.rpartition("_r")
    return head if tail.isdigit() else stem


def cmd_table(args):
    paths = []
    for p in map(Path, args.paths):
        paths.extend(sorted(p.glob("*.csv")) if p.is_dir() else [p])
    groups = defaultdict(list)
    for p in paths:
        if p.name == "summary.csv":
            continue
        groups[_cell_key(p)].append(summarize_trace_csv(p))
    rows = []
    for key in sorted(groups):
        recs = groups[key]
        L = [r["L"] for r in recs]
        rows.append({"key": key, "replicates": len(recs), "mean_L": float(np.mean(L)),
                     "median_L": float(np.median(L)), "violations": sum(r["violations"] for r in recs),
                     "premature": sum(r["final_distance"] > PREMATURE_RADIUS for r in recs)})
    if args.json:
        print(json.dumps(rows, indent=1))
    else:
        print(f"{'cell':<60} {'n':>3} {'median L':>10} {'mean L':>10} {'viol':>5} {'prem':>5}")
        for r in rows:
            print(f"{r['key']:<60} {r['replicates']:>3} {r['median_L']:>10.4f} {r['mean_L']:>10.4f} "
                  f"{r['violations']:>5} {r['premature']:>5}")
    if args.out:
        import csv
        with open(args.out, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(rows[0]) if rows else ["key"], lineterminator="\n")
            writer.writeheader()
            writer.writerows(rows)
    return 0


def cmd_verify(args):
    results = run_checks(args.instances, args.seed)
    for name, ok, detail in results:
        print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
    return 0 if all(ok for _, ok, _ in results) else 1


def build_parser():
    parser = argparse.ArgumentParser(prog="scfo", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run one campaign and write its trace CSV")
    _add_cell_flags(p)
    p.add_argument("--replicate", type=int, default=0)
    p.add_argument("--out", help="trace CSV path")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("grid", help="run an experiment grid from a YAML or JSON file")
    p.add_argument("config", help="grid definition (keys of ExperimentGrid, optionally under 'grid')")
    p.add_argument("--out", default="results", help="output directory")
    p.add_argument("--seed", type=int, default=None, help="override the seed base")
    p.add_argument("--jobs", type=int, default=1, help="worker processes")
    p.set_defaults(func=cmd_grid)

    p = sub.add_parser("table", help="summarize trace CSVs by cell")
    p.add_argument("paths", nargs="+", help="trace CSVs or directories of them")
    p.add_argument("--out", help="write the table as CSV")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_table)

    p = sub.add_parser("verify", help="run the invariant suite; exit status 0 iff every check passes")
    p.add_argument("--instances", type=int, default=200, help="size of the randomized checks")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
