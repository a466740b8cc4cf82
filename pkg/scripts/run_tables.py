"""Run the benchmark studies and print one summary table per grid.

    python scripts/run_tables.py                  # every grid under scripts/grids
    python scripts/run_tables.py slack known -j 4 --out results
"""

import argparse
import time
from pathlib import Path

from scfo.bench import ExperimentGrid, load_problem_config, run_grid, write_summary_csv

GRIDS = Path(__file__).parent / "grids"


def main():
    parser = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("grids", nargs="*", help="grid names (default: all)")
    parser.add_argument("--out", default="results")
    parser.add_argument("-j", "--jobs", type=int, default=1)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    names = args.grids or sorted(p.stem for p in GRIDS.glob("*.yaml"))
    for name in names:
        data = load_problem_config(GRIDS / f"{name}.yaml")
        data["seed_base"] = args.seed
        grid = ExperimentGrid.from_mapping(data)
        out = Path(args.out) / name
        t0 = time.perf_counter()
        records = run_grid(grid, out / "traces", jobs=args.jobs)
        write_summary_csv(records, out / "summary.csv")
        print(f"\n== {name} ({time.perf_counter() - t0:.0f} s)")
        print(f"{'cell':<64} {'median L':>10} {'viol':>5} {'prem':>5}")
        for r in records:
            print(f"{r['key']:<64} {r['median_L']:>10.3f} {r['violations']:>5} {r['premature']:>5}")


if __name__ == "__main__":
    main()
