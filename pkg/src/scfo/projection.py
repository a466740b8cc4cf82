"""Projections of an RTO target onto local feasible-descent cones.

All systems are built in step coordinates ``delta = u - u_k``. A descent row
asks ``sup_{g in box} g @ delta <= -delta_f`` for one function; coordinates
with a nondegenerate box interval get an auxiliary variable ``s_i`` with
``lo_i delta_i <= s_i`` and ``hi_i delta_i <= s_i`` so the supremum becomes the
linear row ``sum_i s_i <= -delta_f``. Degenerate coordinates enter the row
directly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numba as nb
import numpy as np

from .qp import LinearSystem, is_feasible, solve_projection
from .uncertainty import GradientBox, GradientSet

__all__ = [
    "DescentRow",
    "ProjectionParams",
    "descent_rows",
    "descent_system",
    "project_known_constraints",
    "project_known_cost",
    "project_nominal",
    "project_robust",
    "rows_feasible",
    "solve_rows",
]


@dataclass(frozen=True)
class ProjectionParams:
    """Back-off parameters of the projection with their schedules.

    ``eps`` and ``delta_g`` are per-constraint, ``delta_phi`` is scalar. The
    ceilings are the function ranges, so halving from the ceiling is the same
    schedule as halving from one on range-scaled functions.
    """

    eps: np.ndarray
    delta_g: np.ndarray
    delta_phi: float
    eps_bar: np.ndarray
    delta_g_bar: np.ndarray
    delta_phi_bar: float
    eps_floor: np.ndarray
    delta_g_floor: np.ndarray
    delta_phi_floor: float
    P: float = 1.0

    def __post_init__(self):
        for name in ("eps", "delta_g", "eps_bar", "delta_g_bar", "eps_floor", "delta_g_floor"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        if not (np.all(self.eps_floor > 0) and np.all(self.delta_g_floor > 0) and self.delta_phi_floor > 0):
            raise ValueError("floors must be strictly positive")
        if not (np.all(self.eps_floor < self.eps_bar) and np.all(self.delta_g_floor < self.delta_g_bar)
                and self.delta_phi_floor < self.delta_phi_bar):
            raise ValueError("floors must lie below ceilings")
        if not 0.0 <= self.P <= 1.0:
            raise ValueError("P must lie in [0, 1]")

    @classmethod
    def from_ranges(cls, g_range, phi_range: float, floor_ratio: float = 1e-6) -> "ProjectionParams":
        g_range = np.asarray(g_range, dtype=float)
        return cls(g_range, g_range, float(phi_range), g_range, g_range, float(phi_range),
                   floor_ratio * g_range, floor_ratio * g_range, floor_ratio * phi_range)

    def reset(self) -> "ProjectionParams":
        return self.scaled(0)

    def halved(self) -> "ProjectionParams":
        return self._with(0.5 * self.eps, 0.5 * self.delta_g, 0.5 * self.delta_phi, self.P)

    def scaled(self, halvings: int) -> "ProjectionParams":
        """Ceilings halved ``halvings`` times, at full robustness."""
        f = 0.5 ** halvings
        return self._with(f * self.eps_bar, f * self.delta_g_bar, f * self.delta_phi_bar, 1.0)

    def halvings_to_floor(self) -> int:
        """Number of halvings from the ceilings until every value is below its floor."""
        cached = self.__dict__.get("_h_floor")
        if cached is not None:
            return cached
        h = 0
        while not self.scaled(h).below_floors():
            h += 1
        object.__setattr__(self, "_h_floor", h)
        return h

    def with_P(self, P: float) -> "ProjectionParams":
        if not 0.0 <= P <= 1.0:
            raise ValueError("P must lie in [0, 1]")
        return self._with(self.eps, self.delta_g, self.delta_phi, float(P))

    def _with(self, eps, delta_g, delta_phi, P):
        # schedule updates keep the validated ceilings and floors, so skip __post_init__
        out = object.__new__(ProjectionParams)
        object.__setattr__(out, "__dict__", dict(self.__dict__, eps=eps, delta_g=delta_g,
                                                 delta_phi=float(delta_phi), P=P))
        return out

    def below_floors(self) -> bool:
        return bool((self.eps < self.eps_floor).all() and (self.delta_g < self.delta_g_floor).all()
                    and self.delta_phi < self.delta_phi_floor)

    @property
    def eps_level(self) -> float:
        """Smallest ratio of current to ceiling value."""
        return float(np.min(self.eps / self.eps_bar))


@dataclass(frozen=True)
class DescentRow:
    """``sup_{lo <= g <= hi} g @ delta <= rhs``."""

    lo: np.ndarray
    hi: np.ndarray
    rhs: float

    @classmethod
    def from_box(cls, box: GradientBox, margin: float) -> "DescentRow":
        return cls(box.lo, box.hi, -margin)

    @classmethod
    def exact(cls, grad, margin: float) -> "DescentRow":
        g = np.asarray(grad, dtype=float)
        return cls(g, g, -margin)


@nb.njit(cache=True)
def _assemble(lo, hi, rhs, u_k, u_lo, u_hi):
    r, n = lo.shape
    n_s = 0
    for k in range(r):
        for i in range(n):
            if hi[k, i] != lo[k, i]:
                n_s += 1
    A = np.zeros((r + 2 * n_s + 2 * n, n + n_s))
    b = np.zeros(r + 2 * n_s + 2 * n)
    row, col = r, n
    for k in range(r):
        b[k] = rhs[k]
        for i in range(n):
            if hi[k, i] == lo[k, i]:
                A[k, i] = lo[k, i]
            else:
                A[k, col] = 1.0
                A[row, i], A[row, col] = lo[k, i], -1.0
                A[row + 1, i], A[row + 1, col] = hi[k, i], -1.0
                row += 2
                col += 1
    for i in range(n):
        A[row + i, i] = 1.0
        b[row + i] = u_hi[i] - u_k[i]
        A[row + n + i, i] = -1.0
        b[row + n + i] = u_k[i] - u_lo[i]
    return A, b


def _stack(rows, n):
    if not rows:
        return np.zeros((0, n)), np.zeros((0, n)), np.zeros(0)
    return (np.array([r.lo for r in rows]), np.array([r.hi for r in rows]),
            np.array([r.rhs for r in rows], dtype=float))


def descent_system(u_k, rows, u_lo, u_hi) -> LinearSystem:
    """Linear system over ``(delta, s)`` for the given descent rows plus the box.

    Auxiliary variables follow the rows in order, one per nondegenerate
    coordinate.
    """
    u_k = np.asarray(u_k, dtype=float)
    lo, hi, rhs = _stack(rows, u_k.shape[0])
    if not (np.isfinite(lo).all() and np.isfinite(hi).all() and np.isfinite(rhs).all()):
        raise ValueError("descent rows must be finite")
    A, b = _assemble(lo, hi, rhs, u_k, np.asarray(u_lo, dtype=float), np.asarray(u_hi, dtype=float))
    return LinearSystem._trusted(A, b)


def rows_feasible(u_k, rows, u_lo, u_hi) -> bool:
    return is_feasible(descent_system(u_k, rows, u_lo, u_hi))


def solve_rows(u_target, u_k, rows, u_lo, u_hi) -> np.ndarray:
    """Closest point to ``u_target`` satisfying the rows; raises Infeasible."""
    u_k = np.asarray(u_k, dtype=float)
    sys = descent_system(u_k, rows, u_lo, u_hi)
    n = u_k.shape[0]
    res = solve_projection(np.asarray(u_target, dtype=float) - u_k, sys, n_obj=n)
    u = u_k + res.x[:n]
    return np.minimum(np.maximum(u, u_lo), u_hi)


def descent_rows(grads: GradientSet, active, params: ProjectionParams, cost: str = "box",
                 cost_grad=None, known_grads=None, known_active=(), robust: bool = True) -> list:
    """Assemble descent rows.

    Parameters
    ----------
    grads : GradientSet
        Boxes for the cost and every constraint (known ones may hold anything).
    active : sequence of int
        Uncertain constraints needing a descent row.
    cost : {"box", "exact", "none"}
        How the cost enters: robust box row, exact row from ``cost_grad``, or not at all.
    known_grads : array (n_g, n_u), optional
        Analytic gradients of known constraints.
    known_active : sequence of int
        Known constraints needing an exact descent row.
    robust : bool
        Use the boxes; otherwise only the estimates.
    """
    rows = []
    for j in active:
        box = grads.constraints[j]
        rows.append(DescentRow.from_box(box, params.delta_g[j]) if robust
                    else DescentRow.exact(box.estimate, params.delta_g[j]))
    for j in known_active:
        rows.append(DescentRow.exact(known_grads[j], params.delta_g[j]))
    if cost == "box":
        rows.append(DescentRow.from_box(grads.cost, params.delta_phi) if robust
                    else DescentRow.exact(grads.cost.estimate, params.delta_phi))
    elif cost == "exact":
        rows.append(DescentRow.exact(cost_grad, params.delta_phi))
    elif cost != "none":
        raise ValueError(f"unknown cost mode {cost!r}")
    return rows


def _box(box):
    u_lo, u_hi = box
    return np.asarray(u_lo, dtype=float), np.asarray(u_hi, dtype=float)


def project_nominal(u_target, u_k, grads: GradientSet, active, params: ProjectionParams, box) -> np.ndarray:
    """Projection using only the gradient estimates."""
    rows = descent_rows(grads, active, params, robust=False)
    return solve_rows(u_target, u_k, rows, *_box(box))


def project_robust(u_target, u_k, grads: GradientSet, active, params: ProjectionParams, box) -> np.ndarray:
    """Projection that enforces descent for every gradient in the (already
    shrunk) boxes."""
    rows = descent_rows(grads, active, params, robust=True)
    return solve_rows(u_target, u_k, rows, *_box(box))


def project_known_cost(u_target, u_k, grads: GradientSet, active, params: ProjectionParams, box) -> np.ndarray:
    """Projection with no cost row, for use with a line search on a known cost."""
    rows = descent_rows(grads, active, params, cost="none")
    return solve_rows(u_target, u_k, rows, *_box(box))


def project_known_constraints(u_target, u_k, grads: GradientSet, active_uncertain, known_grads,
                              active_known, params: ProjectionParams, box, cost: str = "box",
                              cost_grad=None) -> np.ndarray:
    """Projection adding exact descent rows for active known constraints; the
    cost row is robust (``"box"``), exact (``"exact"``) or absent (``"none"``)."""
    rows = descent_rows(grads, active_uncertain, params, cost=cost, cost_grad=cost_grad,
                        known_grads=known_grads, known_active=active_known)
    return solve_rows(u_target, u_k, rows, *_box(box))
