"""Invariant suite behind ``scfo verify``.

Each check returns ``(name, passed, detail)``. The reference side of the
two-route checks uses scipy's LP solver, never the library's own solver.
"""

from __future__ import annotations

import itertools

import numpy as np
from scipy.optimize import linprog

from .algorithms import ALGORITHMS, AlgorithmSpec
from .bench import ExperimentCell, VIOLATION_TOL, benchmark_problem, run_cell, trace_rows, violation_integral
from .problem import History
from .projection import DescentRow, rows_feasible
from .qp import KKT_TOL, FEAS_TOL, LinearSystem, kkt_residuals, solve_projection
from .simulation import constraint_noise_model, inject_constraint_noise
from .supervisor import CampaignConfig, run_campaign, supervisor_config
from .uncertainty import constraint_upper_bounds

__all__ = ["CHECKS", "run_checks"]


def check_nominal_safety(n, rng):
    """Nominal campaigns on both problems: no violations, cost never rises after a positive gain."""
    bad = []
    for name in ("A", "B"):
        problem = benchmark_problem(name)
        for kind in ALGORITHMS:
            trace = run_campaign(problem, AlgorithmSpec(kind), CampaignConfig(implementation="I"))
            scaled = trace.array("g_true") / problem.g_range
            phi = trace.array("phi_true")
            K = trace.array("K")
            rise = (phi[1:] - phi[:-1])[K[:-1] > 0]
            if scaled.max() > VIOLATION_TOL or (rise.size and rise.max() > 1e-12):
                bad.append(f"{name}/{kind}")
    return "nominal safety and descent", not bad, f"failing campaigns: {bad or 'none'}"


def _vertex_feasible(rows, step_lo, step_hi):
    A, b = [], []
    for row in rows:
        for bits in itertools.product([0, 1], repeat=len(row.lo)):
            A.append(np.where(bits, row.hi, row.lo))
            b.append(row.rhs)
    res = linprog(np.zeros(len(step_lo)), A_ub=np.array(A), b_ub=np.array(b),
                  bounds=list(zip(step_lo, step_hi)), method="highs")
    return res.status == 0


def check_slack_reformulation(n, rng):
    """Slack-lifted robust rows agree with vertex enumeration on random instances."""
    disagree = 0
    for _ in range(n):
        n_u = int(rng.integers(1, 5))
        rows = []
        for _ in range(int(rng.integers(1, 5))):
            est = rng.uniform(-1, 1, n_u)
            half = rng.uniform(0, 1, n_u) * rng.choice([0.0, 0.3, 1.0], n_u)
            rows.append(DescentRow(est - half, est + half, -rng.uniform(0.01, 0.5)))
        u_k = np.zeros(n_u)
        lo, hi = -rng.uniform(0.1, 1, n_u), rng.uniform(0.1, 1, n_u)
        disagree += rows_feasible(u_k, rows, lo, hi) != _vertex_feasible(rows, lo, hi)
    return "slack reformulation", disagree == 0, f"{disagree} disagreements over {n} instances"


def check_projection_kkt(n, rng):
    """Projection QPs meet their optimality conditions on random polyhedra."""
    worst = 0.0
    bad = 0
    for _ in range(n):
        dim = int(rng.integers(1, 6))
        A = rng.normal(size=(int(rng.integers(1, 8)), dim))
        b = A @ rng.normal(size=dim) + rng.uniform(0, 1, A.shape[0])
        sys = LinearSystem(A, b)
        x0 = rng.normal(scale=2.0, size=dim)
        stat, comp, viol, lam_min = kkt_residuals(solve_projection(x0, sys), x0, sys)
        worst = max(worst, stat, comp)
        bad += stat > KKT_TOL or comp > KKT_TOL or viol > FEAS_TOL or lam_min < 0
    return "projection optimality", bad == 0, f"{bad} of {n} outside tolerance, worst residual {worst:.1e}"


def check_bound_coverage(n, rng):
    """Noisy single measurements: the constraint upper bound covers the truth at the three-sigma rate."""
    n = 50 * n
    problem = benchmark_problem("A")
    sigma_g = 0.02
    noise = constraint_noise_model(sigma_g, problem.g_range)
    lip = supervisor_config(problem, CampaignConfig()).lipschitz
    covered = total = 0
    while total < n:
        u = rng.uniform(problem.u_lo, problem.u_hi)
        g = problem.constraints(u)
        if np.any(g > 0):
            continue
        hist = History(problem.n_u, problem.n_g, capacity=1)
        hist.append(0, u, inject_constraint_noise(g, sigma_g, problem.g_range, rng), 0.0)
        covered += int(np.sum(constraint_upper_bounds(hist, noise, lip, np.zeros(problem.n_g)) >= g))
        total += 1
    rate = covered / (n * problem.n_g)
    return "bound coverage", rate >= 0.998, f"coverage {100 * rate:.2f}%"


def check_soft_budget(n, rng):
    """Noise-free soft-constraint runs keep their violation integrals within budget."""
    bad = []
    for name, level in (("A", 0.02), ("B", 0.05)):
        problem = benchmark_problem(name)
        integral = violation_integral(run_cell(ExperimentCell(name, "ideal-target", slack_level=level)))
        if np.any(integral > 10 * level * problem.g_range):
            bad.append(name)
    return "violation budget", not bad, f"over budget: {bad or 'none'}"


def check_determinism(n, rng):
    """A noisy campaign replays identically from its seed."""
    cell = ExperimentCell("B", "modifier-adaptation", "III", 0.3, 0.02)
    first, second = (trace_rows(run_cell(cell, 0)) for _ in range(2))
    return "determinism", first == second, "identical traces" if first == second else "traces differ"


CHECKS = (check_nominal_safety, check_slack_reformulation, check_projection_kkt, check_bound_coverage,
          check_soft_budget, check_determinism)


def run_checks(n=200, seed=0):
    """Run every check; ``n`` sizes the randomized ones."""
    rng = np.random.default_rng(seed)
    return [check(n, rng) for check in CHECKS]
