"""Small dense projection QPs over polyhedra ``{x : A x <= b}``.

Two active-set kernels are used:

* a dual (Goldfarb-Idnani style) active-set method for the strictly convex
  problem ``min 1/2 ||x - x0||^2``; it starts from the unconstrained minimizer,
  needs no feasible starting point and certifies infeasibility on its own, so
  it doubles as the phase-1 feasibility test;
* proximal-point passes of that same kernel for the semidefinite case where
  only the leading ``n_obj`` coordinates enter the objective (slack-lifted
  projections): the remaining coordinates get a small proximal weight around
  their previous value until they stop moving.

The kernels are compiled with numba; the problems here have at most a few
dozen variables, so Python-level overhead would dominate otherwise.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numba as nb
import numpy as np

__all__ = [
    "FEAS_TOL",
    "KKT_TOL",
    "Infeasible",
    "LinearSystem",
    "NumericalFailure",
    "QPResult",
    "is_feasible",
    "kkt_residuals",
    "project_point",
    "solve_projection",
]

FEAS_TOL = 1e-10
KKT_TOL = 1e-8
# proximal weight of the coordinates outside the objective
PROX_WEIGHT = 1e-2
# passes stop once the update falls to roundoff level
PROX_STEP_TOL = 1e-11

_OK, _INFEASIBLE, _FAILED = 0, 1, 2


class Infeasible(Exception):
    """The polyhedron ``{x : A x <= b}`` is empty."""


class NumericalFailure(RuntimeError):
    """An active-set kernel broke down (iteration cap or singular update)."""


@dataclass(frozen=True)
class LinearSystem:
    """Inequalities ``A @ x <= b``."""

    A: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        b = np.atleast_1d(np.asarray(self.b, dtype=float))
        if A.size == 0:
            A = A.reshape(0, A.shape[1] if A.ndim == 2 else 0)
        if A.shape[0] != b.shape[0]:
            raise ValueError(f"A has {A.shape[0]} rows but b has {b.shape[0]} entries")
        if not (np.isfinite(A).all() and np.isfinite(b).all()):
            raise ValueError("LinearSystem entries must be finite")
        object.__setattr__(self, "A", np.ascontiguousarray(A))
        object.__setattr__(self, "b", np.ascontiguousarray(b))

    @classmethod
    def _trusted(cls, A, b) -> "LinearSystem":
        # contiguous float arrays built internally from finite data
        out = object.__new__(cls)
        object.__setattr__(out, "__dict__", {"A": A, "b": b})
        return out

    @classmethod
    def empty(cls, n: int) -> "LinearSystem":
        return cls(np.zeros((0, n)), np.zeros(0))

    @property
    def n_vars(self) -> int:
        return self.A.shape[1]

    @property
    def n_rows(self) -> int:
        return self.A.shape[0]

    def violation(self, x) -> float:
        if self.n_rows == 0:
            return 0.0
        return float(max(0.0, np.max(self.A @ x - self.b)))


class QPResult(NamedTuple):
    x: np.ndarray
    multipliers: np.ndarray
    active: np.ndarray
    iterations: int


# ---------------------------------------------------------------------------
# compiled kernels
# ---------------------------------------------------------------------------


@nb.njit(cache=True)
def _null_step(A, active, q, a_p):
    """Component of ``a_p`` orthogonal to the active normals, and the
    coefficients of its projection onto them."""
    n = a_p.shape[0]
    if q == 0:
        return a_p.copy(), np.zeros(0)
    N = np.empty((n, q))
    for j in range(q):
        N[:, j] = A[active[j]]
    Q, R = np.linalg.qr(N)
    Qt = np.ascontiguousarray(Q.T)
    qa = Qt @ a_p
    z = a_p - Qt.T.copy() @ qa
    r = np.linalg.solve(R, qa)
    return z, r


@nb.njit(cache=True)
def _dual_active_set(A, b, x0, feas_tol, max_iter):
    m, n = A.shape
    x = x0.copy()
    lam = np.zeros(m)
    active = np.full(n + 1, -1, np.int64)
    is_active = np.zeros(m, np.bool_)
    q = 0
    it = 0
    norms = np.zeros(m)
    for i in range(m):
        norms[i] = np.sqrt(np.sum(A[i] * A[i]))
        if norms[i] == 0.0 and b[i] < -feas_tol:
            return _INFEASIBLE, x, lam, is_active, it

    while True:
        p = -1
        worst = feas_tol
        for i in range(m):
            if is_active[i] or norms[i] == 0.0:
                continue
            v = np.dot(A[i], x) - b[i]
            if v > worst:
                worst = v
                p = i
        if p < 0:
            return _OK, x, lam, is_active, it

        a_p = A[p].copy()
        while True:
            it += 1
            if it > max_iter:
                return _FAILED, x, lam, is_active, it
            z, r = _null_step(A, active, q, a_p)
            zz = np.dot(z, z)
            s_p = np.dot(a_p, x) - b[p]
            dependent = np.sqrt(zz) <= 1e-10 * norms[p]
            t2 = np.inf if dependent else s_p / zz
            t1 = np.inf
            drop = -1
            for j in range(q):
                if r[j] > 1e-14:
                    ratio = lam[active[j]] / r[j]
                    if ratio < t1:
                        t1 = ratio
                        drop = j
            if t1 == np.inf and t2 == np.inf:
                return _INFEASIBLE, x, lam, is_active, it
            if t2 <= t1:
                x = x - t2 * z
                for j in range(q):
                    lam[active[j]] -= t2 * r[j]
                lam[p] += t2
                active[q] = p
                q += 1
                is_active[p] = True
                break
            if not dependent:
                x = x - t1 * z
            for j in range(q):
                lam[active[j]] -= t1 * r[j]
            lam[p] += t1
            out = active[drop]
            lam[out] = 0.0
            is_active[out] = False
            for j in range(drop, q - 1):
                active[j] = active[j + 1]
            q -= 1
            active[q] = -1


@nb.njit(cache=True)
def _proximal_projection(A, b, x0, x_start, n_obj, mu, feas_tol, max_iter, max_outer, step_tol):
    """Proximal-point iterations on the coordinates outside the objective.

    Each pass solves the strictly convex problem that adds
    ``mu/2 ||y - y_prev||^2`` for the free coordinates ``y`` with the dual
    kernel (after rescaling them to unit weight). A fixed point satisfies the
    KKT conditions of the original semidefinite problem with the same
    multipliers.
    """
    m, n = A.shape
    scale = np.ones(n)
    for i in range(n_obj, n):
        scale[i] = 1.0 / np.sqrt(mu)
    As = A * scale
    x = x_start.copy()
    lam = np.zeros(m)
    is_active = np.zeros(m, np.bool_)
    total = 0
    for outer in range(max_outer):
        target = np.empty(n)
        for i in range(n):
            target[i] = (x0[i] if i < n_obj else x[i]) / scale[i]
        status, y, lam, is_active, it = _dual_active_set(As, b, target, feas_tol, max_iter)
        total += it
        if status != _OK:
            return status, x, lam, is_active, total
        x_new = y * scale
        change = np.max(np.abs(x_new - x))
        x = x_new
        if change <= step_tol * (1.0 + np.max(np.abs(x))):
            return _OK, x, lam, is_active, total
    return _FAILED, x, lam, is_active, total


# ---------------------------------------------------------------------------
# public API
# ---------------------------------------------------------------------------


def _pad_target(x0, n):
    x0 = np.asarray(x0, dtype=float).ravel()
    if x0.shape[0] > n:
        raise ValueError(f"target has {x0.shape[0]} entries but system has {n} variables")
    if x0.shape[0] < n:
        x0 = np.concatenate([x0, np.zeros(n - x0.shape[0])])
    return x0


def solve_projection(x0, sys: LinearSystem, n_obj: int | None = None,
                     feas_tol: float = FEAS_TOL, max_iter: int = 2000) -> QPResult:
    """Minimize ``1/2 sum_{i < n_obj} (x_i - x0_i)^2`` subject to ``sys``.

    ``x0`` may be shorter than the number of variables; missing entries are
    the reference point of the zero-weight coordinates (they do not enter
    the objective when ``n_obj`` excludes them). Raises :class:`Infeasible`
    on an empty polyhedron.
    """
    n = sys.n_vars
    x0 = _pad_target(x0, n)
    n_obj = n if n_obj is None else int(n_obj)
    if not 0 <= n_obj <= n:
        raise ValueError("n_obj out of range")

    status, x, lam, active, iters = _dual_active_set(sys.A, sys.b, x0, feas_tol * 0.1, max_iter)
    if status == _INFEASIBLE:
        raise Infeasible("polyhedron is empty")
    if status == _FAILED:
        raise NumericalFailure("dual active-set iteration cap reached")
    if n_obj < n:
        status, x, lam, active, more = _proximal_projection(
            sys.A, sys.b, x0, x.copy(), n_obj, PROX_WEIGHT, feas_tol * 0.1, max_iter, max_iter, PROX_STEP_TOL)
        iters += more
        if status == _INFEASIBLE:
            raise Infeasible("polyhedron is empty")
        if status == _FAILED:
            raise NumericalFailure("proximal iterations did not settle")
    if sys.violation(x) > feas_tol:
        raise NumericalFailure(f"projection left a violation of {sys.violation(x):.3e}")
    return QPResult(x, lam, np.flatnonzero(active), iters)


def project_point(x0, sys: LinearSystem, n_obj: int | None = None) -> np.ndarray:
    """Euclidean projection of ``x0`` onto ``{x : A x <= b}``."""
    return solve_projection(x0, sys, n_obj).x


def is_feasible(sys: LinearSystem) -> bool:
    """Whether ``{x : A x <= b}`` is nonempty (phase-1 projection of the origin)."""
    if sys.n_rows == 0:
        return True
    status, _, _, _, _ = _dual_active_set(sys.A, sys.b, np.zeros(sys.n_vars), FEAS_TOL * 0.1, 2000)
    if status == _FAILED:
        raise NumericalFailure("dual active-set iteration cap reached")
    return status == _OK


def kkt_residuals(result: QPResult, x0, sys: LinearSystem, n_obj: int | None = None):
    """Return (stationarity, complementarity, primal violation, min multiplier)."""
    n = sys.n_vars
    x0 = _pad_target(x0, n)
    w = np.zeros(n)
    w[: (n if n_obj is None else n_obj)] = 1.0
    x, lam = result.x, result.multipliers
    grad = w * (x - x0) + sys.A.T @ lam
    slack = sys.A @ x - sys.b if sys.n_rows else np.zeros(0)
    comp = float(np.max(np.abs(lam * slack))) if sys.n_rows else 0.0
    return (float(np.max(np.abs(grad))) if n else 0.0, comp, sys.violation(x),
            float(np.min(lam)) if sys.n_rows else 0.0)
