"""Independent reference computations used by the tests.

Each oracle takes a different route from the library: vertex enumeration
solved with scipy's LP solver instead of the slack-lifted active-set
feasibility test, and brute-force grids polished by SLSQP instead of the
dual active-set projection.
"""

import itertools

import numpy as np
from scipy.optimize import linprog, minimize


def box_vertices(lo, hi):
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    return np.array([np.where(bits, hi, lo) for bits in itertools.product([0, 1], repeat=len(lo))])


def semi_infinite_feasible(rows, step_lo, step_hi):
    """Whether some step ``d`` in ``[step_lo, step_hi]`` has ``v @ d <= rhs``
    for every vertex ``v`` of every row box.

    ``rows`` holds ``(lo, hi, rhs)`` triples.
    """
    n = len(step_lo)
    A, b = [], []
    for lo, hi, rhs in rows:
        for v in box_vertices(lo, hi):
            A.append(v)
            b.append(rhs)
    if not A:
        return bool(np.all(np.asarray(step_lo) <= np.asarray(step_hi)))
    res = linprog(np.zeros(n), A_ub=np.array(A), b_ub=np.array(b), bounds=list(zip(step_lo, step_hi)),
                  method="highs")
    return res.status == 0


def robust_margin(rows, step_lo, step_hi):
    """Largest ``t`` with ``v @ d + t <= rhs`` for all vertices; positive
    means strictly feasible. Used to skip near-degenerate random instances."""
    n = len(step_lo)
    A, b = [], []
    for lo, hi, rhs in rows:
        for v in box_vertices(lo, hi):
            A.append(np.append(v, 1.0))
            b.append(rhs)
    c = np.zeros(n + 1)
    c[-1] = -1.0
    bounds = list(zip(step_lo, step_hi)) + [(None, 1.0)]
    res = linprog(c, A_ub=np.array(A), b_ub=np.array(b), bounds=bounds, method="highs")
    return res.x[-1] if res.status == 0 else -np.inf


def grid_polish_projection(x0, A, b, lo, hi, points=21):
    """Minimum of ``1/2 |x - x0|^2`` over ``A x <= b`` inside the box ``[lo, hi]``
    by a feasible grid scan followed by SLSQP from the best grid points.

    Returns ``(value, x)``, or ``(inf, None)`` when no grid point is feasible
    and the polish does not reach a feasible point either.
    """
    x0, lo, hi = (np.asarray(v, float) for v in (x0, lo, hi))
    axes = [np.linspace(l, h, points) for l, h in zip(lo, hi)]
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, len(x0))
    ok = np.all(grid @ A.T <= b + 1e-12, axis=1)
    vals = 0.5 * np.sum((grid - x0) ** 2, axis=1)
    starts = list(grid[ok][np.argsort(vals[ok])[:3]]) if ok.any() else [np.clip(x0, lo, hi)]
    best_val, best_x = np.inf, None
    cons = [{"type": "ineq", "fun": lambda x: b - A @ x, "jac": lambda x: -A}]
    for s in starts:
        res = minimize(lambda x: 0.5 * np.sum((x - x0) ** 2), s, jac=lambda x: x - x0, method="SLSQP",
                       bounds=list(zip(lo, hi)), constraints=cons, options={"ftol": 1e-15, "maxiter": 500})
        x = np.clip(res.x, lo, hi)
        if np.max(A @ x - b, initial=0.0) <= 1e-9:
            val = 0.5 * np.sum((x - x0) ** 2)
            if val < best_val:
                best_val, best_x = val, x
    return best_val, best_x


def first_feasible_level(levels, rows_at, step_lo, step_hi):
    """Walk the robustness levels from the top and return the first one whose
    rows are feasible by vertex enumeration (the last level if none is)."""
    for P in levels:
        if semi_infinite_feasible(rows_at(P), step_lo, step_hi):
            return P
    return levels[-1]
