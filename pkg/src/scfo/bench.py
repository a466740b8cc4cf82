"""Benchmark problems A and B, the experiment grid and CSV traces."""

from __future__ import annotations

import csv
import itertools
import json
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np
import yaml

from .algorithms import AlgorithmSpec
from .problem import CampaignTrace, CostChange, PolyOracle, RtoProblem, find_plant_optimum, optimality_loss
from .simulation import constraint_noise_model, inject_constraint_noise, inject_gradient_noise
from .supervisor import CampaignConfig, run_campaign

__all__ = [
    "CONCAVITY_CASES",
    "CSV_COLUMNS",
    "PREMATURE_RADIUS",
    "VIOLATION_TOL",
    "ExperimentCell",
    "ExperimentGrid",
    "benchmark_problem",
    "constraint_noise_model",
    "inject_constraint_noise",
    "inject_gradient_noise",
    "load_problem_config",
    "make_problem",
    "read_trace_csv",
    "run_cell",
    "run_experiment",
    "run_grid",
    "summarize_trace",
    "summarize_trace_csv",
    "trace_rows",
    "violation_integral",
    "write_summary_csv",
    "write_trace_csv",
]

# final distance to the optimum above which a run counts as stuck
PREMATURE_RADIUS = 0.05
# range-scaled constraint value above which an iterate counts as violating
VIOLATION_TOL = 1e-9

# polynomials as [coef, [power_u1, power_u2]] terms
BENCHMARK_CONFIG = {
    "n_u": 2,
    "cost": [[1.0, [2, 0]], [-1.0, [1, 0]], [0.25, [0, 0]], [1.0, [0, 2]], [-0.8, [0, 1]], [0.16, [0, 0]]],
    "constraints": [
        [[-6.0, [2, 0]], [-3.5, [1, 0]], [1.0, [0, 1]], [-0.6, [0, 0]]],
        [[2.0, [2, 0]], [0.5, [1, 0]], [1.0, [0, 1]], [-0.75, [0, 0]]],
        [[-1.0, [2, 0]], [-1.0, [0, 2]], [0.3, [0, 1]], [-0.0225, [0, 0]], [0.01, [0, 0]]],
    ],
    "convex": [False, True, False],
    "u_lo": [-0.5, 0.0],
    "u_hi": [0.5, 0.8],
    "lipschitz": [[9.5, 1.0], [2.5, 1.0], [1.0, 1.3]],
    "kappa_cost": [2.2, 0.35],
    "variants": {
        "A": {"u0": [-0.5, 0.05], "k_f": 1000},
        "B": {"u0": [0.0, 0.4], "k_f": 100},
    },
    "cost_change": {
        "k": 50,
        "cost": [[1.0, [2, 0]], [0.5, [1, 0]], [0.0625, [0, 0]], [1.0, [0, 2]], [-1.2, [0, 1]], [0.36, [0, 0]]],
    },
}

# inputs in which g1 and g3 are declared concave
CONCAVITY_CASES = {
    "none": (False, False),
    "u1": (True, False),
    "u2": (False, True),
    "both": (True, True),
}


def load_problem_config(path) -> dict:
    """Problem definition from a YAML or JSON file (same layout as the built-in one)."""
    text = Path(path).read_text()
    if str(path).endswith(".json"):
        return json.loads(text)
    return yaml.safe_load(text)


def _poly(terms):
    return [(float(c), tuple(p)) for c, p in terms]


def make_problem(config: dict, variant: str, cost_change: bool = False) -> RtoProblem:
    """Build a problem from a configuration mapping and check its start point."""
    n_u = int(config["n_u"])
    if variant not in config["variants"]:
        raise ValueError(f"unknown problem variant {variant!r}")
    var = config["variants"][variant]
    cost = PolyOracle([_poly(config["cost"])], n_u, scalar=True)
    cons = PolyOracle([_poly(p) for p in config["constraints"]], n_u)
    u_lo, u_hi = np.array(config["u_lo"], float), np.array(config["u_hi"], float)
    u0 = np.array(var["u0"], float)
    if np.any(cons(u0) >= 0):
        raise ValueError(f"start point {u0} is not strictly feasible")
    u_star, phi_star = _optimum(json.dumps(config["cost"]), json.dumps(config["constraints"]), n_u,
                               tuple(u_lo), tuple(u_hi))
    g_range, phi_range = _ranges(json.dumps(config["cost"]), json.dumps(config["constraints"]), n_u,
                                 tuple(u_lo), tuple(u_hi))
    change = None
    if cost_change:
        cc = config["cost_change"]
        new_cost = PolyOracle([_poly(cc["cost"])], n_u, scalar=True)
        cu, cphi = _optimum(json.dumps(cc["cost"]), json.dumps(config["constraints"]), n_u,
                            tuple(u_lo), tuple(u_hi))
        change = CostChange(int(cc["k"]), new_cost, new_cost.grad, cphi, cu)
    return RtoProblem(
        n_u=n_u, n_g=len(config["constraints"]), cost=cost, cost_grad=cost.grad, constraints=cons,
        constraints_jac=cons.grad, u_lo=u_lo, u_hi=u_hi, u0=u0, name=variant,
        convex_constraints=np.array(config.get("convex", [False] * len(config["constraints"])), bool),
        lipschitz=np.array(config["lipschitz"], float), kappa_cost=np.array(config["kappa_cost"], float),
        cost_change=change, k_f=int(var["k_f"]), u_star=u_star, phi_star=phi_star,
        g_range=g_range, phi_range=phi_range,
    )


@lru_cache(maxsize=None)
def _optimum(cost_json, cons_json, n_u, u_lo, u_hi):
    cost = PolyOracle([_poly(json.loads(cost_json))], n_u, scalar=True)
    cons = PolyOracle([_poly(p) for p in json.loads(cons_json)], n_u)
    u, phi = find_plant_optimum(cost, cost.grad, cons, cons.grad, u_lo, u_hi)
    u.setflags(write=False)
    return u, phi


@lru_cache(maxsize=None)
def _ranges(cost_json, cons_json, n_u, u_lo, u_hi):
    from .problem import function_ranges

    cost = PolyOracle([_poly(json.loads(cost_json))], n_u, scalar=True)
    cons = PolyOracle([_poly(p) for p in json.loads(cons_json)], n_u)
    probe = RtoProblem(n_u=n_u, n_g=len(json.loads(cons_json)), cost=cost, cost_grad=cost.grad,
                       constraints=cons, constraints_jac=cons.grad, u_lo=u_lo, u_hi=u_hi,
                       u0=np.zeros(n_u), g_range=np.ones(len(json.loads(cons_json))), phi_range=1.0)
    g_range, phi_range = function_ranges(probe)
    g_range.setflags(write=False)
    return g_range, phi_range


def benchmark_problem(name: str = "A", cost_change: bool = False, known=(), config: dict = None) -> RtoProblem:
    """Problem ``"A"`` or ``"B"``.

    ``known`` lists problem elements whose analytic form the supervisor may
    use: ``"phi"`` for the cost, ``"g1"``... for constraints.
    """
    problem = make_problem(BENCHMARK_CONFIG if config is None else config, name, cost_change)
    known = set(known)
    bad = known - {"phi"} - {f"g{j + 1}" for j in range(problem.n_g)}
    if bad:
        raise ValueError(f"unknown problem elements {sorted(bad)}")
    if known:
        mask = np.array([f"g{j + 1}" in known for j in range(problem.n_g)])
        problem = problem.with_options(known_cost="phi" in known, known_constraints=mask)
    return problem


def concavity_mask(case: str, n_g: int = 3) -> np.ndarray:
    """Concavity declarations for g1 and g3 in the named inputs."""
    if case not in CONCAVITY_CASES:
        raise ValueError(f"unknown concavity case {case!r}")
    mask = np.zeros((n_g, 2), dtype=bool)
    mask[[0, 2]] = CONCAVITY_CASES[case]
    return mask


# ---------------------------------------------------------------------------
# traces
# ---------------------------------------------------------------------------

CSV_COLUMNS = ["k", "u1", "u2", "phi_true", "g1_true", "g2_true", "g3_true", "phi_meas", "g1_meas", "g2_meas",
               "g3_meas", "K", "P", "eps_min", "variant", "d1", "d2", "d3"]


def _fmt(x) -> str:
    if isinstance(x, (str, np.str_)):
        return str(x)
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return "%.17g" % float(x)


def _columns(n_u, n_g):
    cols = ["k"] + [f"u{i + 1}" for i in range(n_u)] + ["phi_true"] + [f"g{j + 1}_true" for j in range(n_g)]
    cols += ["phi_meas"] + [f"g{j + 1}_meas" for j in range(n_g)] + ["K", "P", "eps_min", "variant"]
    cols += [f"d{j + 1}" for j in range(n_g)] + ["binding", "status", "ref_k", "phi_star"]
    cols += [f"u{i + 1}_star" for i in range(n_u)]
    names = ["phi"] + [f"g{j + 1}" for j in range(n_g)]
    for side in ("lo", "hi"):
        cols += [f"box_{side}_{f}_u{i + 1}" for f in names for i in range(n_u)]
    return cols


def trace_rows(trace: CampaignTrace):
    """Header and formatted rows of a trace; the leading columns are :data:`CSV_COLUMNS`."""
    r0 = trace.records[0]
    n_u, n_g = len(r0.u), len(r0.g_meas)
    header = _columns(n_u, n_g)
    width = (1 + n_g) * n_u
    u_star = trace.u_star if trace.u_star is not None else np.full(n_u, np.nan)
    rows = []
    for r in trace.records:
        lo = r.box_lo if r.box_lo is not None else np.full(width, np.nan)
        hi = r.box_hi if r.box_hi is not None else np.full(width, np.nan)
        vals = [r.k, *r.u, r.phi_true, *r.g_true, r.phi_meas, *r.g_meas, r.K, r.P, r.eps_min, r.variant, *r.d,
                r.binding, r.status, r.ref_k, r.phi_star, *u_star, *lo, *hi]
        rows.append([_fmt(v) for v in vals])
    return header, rows


def write_trace_csv(trace: CampaignTrace, path):
    header, rows = trace_rows(trace)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def read_trace_csv(path) -> dict:
    """Columns of a trace CSV; numeric columns as float arrays."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        cells = list(reader)
    out = {}
    for i, name in enumerate(header):
        col = [c[i] for c in cells]
        try:
            out[name] = np.array(col, dtype=float)
        except ValueError:
            out[name] = np.array(col)
    return out


def summarize_trace_csv(path, tol: float = VIOLATION_TOL) -> dict:
    """Summary of a trace CSV written by :func:`write_trace_csv`; constraint
    values are compared with ``tol`` unscaled."""
    cols = read_trace_csv(path)
    g = np.column_stack([cols[c] for c in cols if c.startswith("g") and c.endswith("_true")])
    n_u = sum(1 for c in cols if c.startswith("u") and c.endswith("_star"))
    u_final = np.array([cols[f"u{i + 1}"][-1] for i in range(n_u)])
    u_star = np.array([cols[f"u{i + 1}_star"][-1] for i in range(n_u)])
    return {
        "L": float(np.sum(cols["phi_true"] - cols["phi_star"])),
        "violations": int(np.sum(np.any(g > tol, axis=1))),
        "violation_integral": np.sum(np.maximum(g, 0.0), axis=0).tolist(),
        "final_distance": float(np.linalg.norm(u_final - u_star)),
        "iterations": int(cols["k"][-1]),
    }


def violation_integral(trace: CampaignTrace) -> np.ndarray:
    """Per-constraint sum of positive true constraint values."""
    g = trace.array("g_true")
    return np.sum(np.maximum(g, 0.0), axis=0)


def summarize_trace(trace: CampaignTrace, tol: float = VIOLATION_TOL, g_range=None) -> dict:
    """Loss, violation count, violation integrals, final distance and length of
    a trace. Constraint values are divided by ``g_range`` before comparing
    with ``tol``."""
    g = trace.array("g_true")
    scaled = g if g_range is None else g / np.asarray(g_range, dtype=float)
    u_final = trace.records[-1].u
    u_star = trace.u_star
    last_k = trace.records[-1].k
    return {
        "L": optimality_loss(trace),
        "violations": int(np.sum(np.any(scaled > tol, axis=1))),
        "violation_integral": violation_integral(trace).tolist(),
        "final_distance": float(np.linalg.norm(u_final - u_star)) if u_star is not None else np.nan,
        "iterations": last_k,
    }


# ---------------------------------------------------------------------------
# experiment grid
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ExperimentCell:
    """One campaign configuration of the experiment grid."""

    problem: str = "A"
    algorithm: str = "ideal-target"
    implementation: str = "I"
    sigma: float = 0.0
    sigma_g: float = 0.0
    concavity: str = "none"
    reuse_history: bool = False
    cost_change: bool = False
    slack_level: float = 0.0
    known: tuple = ()
    q_scale: float = 1.0
    k_f: int = None

    @property
    def key(self) -> str:
        parts = [self.problem, AlgorithmSpec(self.algorithm).kind, self.implementation, f"s{self.sigma:g}",
                 f"sg{self.sigma_g:g}", f"cc-{self.concavity}", f"l{self.slack_level:g}",
                 "known-" + "+".join(self.known) if self.known else "known-none"]
        if self.reuse_history:
            parts.append("reuse")
        if self.cost_change:
            parts.append("change")
        if self.q_scale != 1.0:
            parts.append(f"q{self.q_scale:g}")
        if self.k_f is not None:
            parts.append(f"kf{self.k_f}")
        return "_".join(parts)

    @property
    def seed_key(self) -> str:
        """Cell key without the noise settings: cells that differ only in noise
        level or implementation share random streams (common random numbers),
        which keeps noise-level comparisons from being swamped by seed luck."""
        parts = [self.problem, AlgorithmSpec(self.algorithm).kind, f"cc-{self.concavity}", f"l{self.slack_level:g}",
                 "+".join(self.known), str(self.reuse_history), str(self.cost_change), f"q{self.q_scale:g}"]
        return "_".join(parts)

    def seed(self, replicate: int, seed_base: int = 0):
        """Seed entropy as a deterministic function of the cell and replicate."""
        return [int(seed_base), zlib.crc32(self.seed_key.encode()), int(replicate)]

    def build(self):
        """Problem, algorithm and campaign configuration for this cell."""
        problem = benchmark_problem(self.problem, cost_change=self.cost_change, known=self.known)
        cfg = CampaignConfig(
            implementation=self.implementation, sigma=self.sigma, sigma_g=self.sigma_g,
            slack_level=self.slack_level, concave_in=concavity_mask(self.concavity, problem.n_g),
            q_bound=self.q_scale * problem.cost_hessian_bound, reuse_history=self.reuse_history)
        return problem, AlgorithmSpec(self.algorithm), cfg


@dataclass
class ExperimentGrid:
    """Cartesian grid of cells with a replicate count and a seed base."""

    problems: tuple = ("A",)
    algorithms: tuple = ("ideal-target",)
    implementations: tuple = ("I",)
    sigmas: tuple = (0.0,)
    sigma_gs: tuple = (0.0,)
    concavity: tuple = ("none",)
    reuse_history: tuple = (False,)
    cost_change: tuple = (False,)
    slack_levels: tuple = (0.0,)
    known: tuple = ((),)
    q_scale: float = 1.0
    k_f: int = None
    replicates: int = 1
    seed_base: int = 0

    def cells(self):
        for combo in itertools.product(self.problems, self.algorithms, self.implementations, self.sigmas,
                                       self.sigma_gs, self.concavity, self.reuse_history, self.cost_change,
                                       self.slack_levels, self.known):
            p, a, impl, s, sg, cc, reuse, change, slack, known = combo
            if impl == "I" and s > 0:
                continue
            yield ExperimentCell(p, a, impl, float(s), float(sg), cc, bool(reuse), bool(change), float(slack),
                                 tuple(known), self.q_scale, self.k_f)

    @classmethod
    def from_mapping(cls, data: dict) -> "ExperimentGrid":
        tuples = {k: tuple(tuple(x) if k == "known" else x for x in v) if isinstance(v, list) else v
                  for k, v in data.items()}
        return cls(**tuples)


def run_cell(cell: ExperimentCell, replicate: int = 0, seed_base: int = 0) -> CampaignTrace:
    problem, algo, cfg = cell.build()
    return run_campaign(problem, algo, cfg, k_f=cell.k_f, seed=cell.seed(replicate, seed_base))


def run_experiment(cell: ExperimentCell, replicates: int = 1, out_path=None, seed_base: int = 0) -> dict:
    """Run the replicates of one cell; write one CSV per replicate under
    ``out_path`` (a directory) when given, and return the summary record."""
    out = None if out_path is None else Path(out_path)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    losses, violations, premature, integrals = [], [], [], []
    g_range = cell.build()[0].g_range
    for rep in range(replicates):
        trace = run_cell(cell, rep, seed_base)
        if out is not None:
            write_trace_csv(trace, out / f"{cell.key}_r{rep}.csv")
        s = summarize_trace(trace, g_range=g_range)
        losses.append(s["L"])
        violations.append(s["violations"])
        integrals.append(s["violation_integral"])
        premature.append(s["final_distance"] > PREMATURE_RADIUS)
    rec = asdict(cell)
    rec["known"] = "+".join(cell.known)
    rec.update(key=cell.key, replicates=replicates, mean_L=float(np.mean(losses)),
               median_L=float(np.median(losses)), violations=int(np.sum(violations)),
               premature=int(np.sum(premature)), max_violation_integral=float(np.max(integrals)),
               losses=losses)
    return rec


def _run_grid_cell(args):
    cell, replicates, out_path, seed_base = args
    return run_experiment(cell, replicates, out_path, seed_base)


def run_grid(grid: ExperimentGrid, out_path=None, jobs: int = 1) -> list:
    """Summary records of every cell of ``grid``, in cell order.

    With ``jobs > 1`` cells run in worker processes; each cell owns its
    random streams and output files, so the result does not depend on the
    worker count.
    """
    tasks = [(cell, grid.replicates, out_path, grid.seed_base) for cell in grid.cells()]
    if jobs <= 1:
        return [_run_grid_cell(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_run_grid_cell, tasks))


SUMMARY_COLUMNS = ["key", "problem", "algorithm", "implementation", "sigma", "sigma_g", "concavity",
                   "reuse_history", "cost_change", "slack_level", "known", "replicates", "mean_L", "median_L",
                   "violations", "premature", "max_violation_integral"]


def write_summary_csv(records, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(SUMMARY_COLUMNS)
        for r in records:
            writer.writerow([str(r[c]) if isinstance(r[c], bool) else _fmt(r[c]) for c in SUMMARY_COLUMNS])
