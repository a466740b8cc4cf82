"""Problem definition, iterate bookkeeping, the input filter and the loss metric."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.optimize import minimize

__all__ = [
    "CampaignTrace",
    "CostChange",
    "History",
    "IterateState",
    "PolyOracle",
    "PolySet",
    "RtoProblem",
    "TraceRecord",
    "apply_input_filter",
    "find_plant_optimum",
    "function_ranges",
    "optimality_loss",
]


class PolySet:
    """A stack of polynomials in ``n`` variables sharing one monomial basis.

    Parameters
    ----------
    polys : list of list of (coef, powers)
        One entry per function; ``powers`` is a tuple of nonnegative integer
        exponents of length ``n``.
    n : int
        Number of variables.
    """

    def __init__(self, polys, n: int):
        basis = {}
        for poly in polys:
            for _, powers in poly:
                powers = tuple(int(p) for p in powers)
                if len(powers) != n or min(powers) < 0:
                    raise ValueError(f"bad exponent tuple {powers}")
                basis.setdefault(powers, len(basis))
        if not basis:
            basis[(0,) * n] = 0
        self.n = n
        self.n_funcs = len(polys)
        self.powers = np.array(list(basis), dtype=float).reshape(len(basis), n)
        self.coef = np.zeros((len(polys), len(basis)))
        for f, poly in enumerate(polys):
            for c, powers in poly:
                self.coef[f, basis[tuple(int(p) for p in powers)]] += float(c)
        self.polys = [[(float(c), tuple(int(p) for p in powers)) for c, powers in poly] for poly in polys]
        # exponent tables for the derivative monomials
        self._dpow = np.maximum(self.powers[None, :, :] - np.eye(n)[:, None, :], 0.0)
        self._dfac = self.powers.T.copy()

    def values(self, u) -> np.ndarray:
        """Function values; ``u`` may carry leading batch axes."""
        u = np.asarray(u, dtype=float)
        mono = np.prod(u[..., None, :] ** self.powers, axis=-1)
        return mono @ self.coef.T

    def jacobian(self, u) -> np.ndarray:
        """Jacobian of shape (n_funcs, n) at a single point."""
        u = np.asarray(u, dtype=float)
        dmono = self._dfac * np.prod(u[None, None, :] ** self._dpow, axis=-1)
        return self.coef @ dmono.T


class PolyOracle:
    """Callable view of a :class:`PolySet`; ``scalar`` returns the single
    function value instead of a length-1 vector."""

    def __init__(self, polys, n: int, scalar: bool = False):
        self.set = PolySet(polys, n)
        self.scalar = scalar

    def __call__(self, u):
        v = self.set.values(u)
        return float(v[0]) if self.scalar else v

    def batch(self, pts) -> np.ndarray:
        v = self.set.values(pts)
        return v[:, 0] if self.scalar else v

    def grad(self, u) -> np.ndarray:
        J = self.set.jacobian(u)
        return J[0] if self.scalar else J


@dataclass(frozen=True)
class CostChange:
    """Replacement cost active from iteration ``k`` onwards."""

    k: int
    cost: Callable
    cost_grad: Callable
    phi_star: float = np.nan
    u_star: Optional[np.ndarray] = None


@dataclass
class RtoProblem:
    """A steady-state optimization problem ``min cost(u) s.t. constraints(u) <= 0``
    over a box, seen through plant oracles.

    ``known_constraints`` flags constraints whose analytic form is available to
    the supervisor; ``known_cost`` does the same for the cost. ``convex_constraints``
    flags known constraints that are convex, which lets feasibility of a known
    constraint at the end of a step certify the whole step.
    """

    n_u: int
    n_g: int
    cost: Callable
    cost_grad: Callable
    constraints: Callable
    constraints_jac: Callable
    u_lo: np.ndarray
    u_hi: np.ndarray
    u0: np.ndarray
    name: str = "problem"
    known_cost: bool = False
    known_constraints: np.ndarray = None
    convex_constraints: np.ndarray = None
    lipschitz: np.ndarray = None
    kappa_cost: np.ndarray = None
    cost_hessian_bound: np.ndarray = None
    cost_change: Optional[CostChange] = None
    k_f: int = 100
    g_range: np.ndarray = None
    phi_range: float = None
    u_star: np.ndarray = None
    phi_star: float = None

    def __post_init__(self):
        self.u_lo = np.asarray(self.u_lo, dtype=float)
        self.u_hi = np.asarray(self.u_hi, dtype=float)
        self.u0 = np.asarray(self.u0, dtype=float)
        if self.u_lo.shape != (self.n_u,) or self.u_hi.shape != (self.n_u,):
            raise ValueError("box bounds must have length n_u")
        if not np.all(self.u_lo < self.u_hi):
            raise ValueError("box bounds must satisfy u_lo < u_hi componentwise")
        if self.known_constraints is None:
            self.known_constraints = np.zeros(self.n_g, dtype=bool)
        self.known_constraints = np.asarray(self.known_constraints, dtype=bool)
        if self.convex_constraints is None:
            self.convex_constraints = np.zeros(self.n_g, dtype=bool)
        self.convex_constraints = np.asarray(self.convex_constraints, dtype=bool)
        if self.known_constraints.shape != (self.n_g,):
            raise ValueError("known_constraints must have length n_g")
        if self.cost_hessian_bound is None:
            self.cost_hessian_bound = 2.0 * np.eye(self.n_u)
        if self.g_range is None or self.phi_range is None:
            g_range, phi_range = function_ranges(self)
            if self.g_range is None:
                self.g_range = g_range
            if self.phi_range is None:
                self.phi_range = phi_range
        self.g_range = np.asarray(self.g_range, dtype=float)

    @property
    def uncertain(self) -> np.ndarray:
        return ~self.known_constraints

    def in_box(self, u, tol: float = 1e-12) -> bool:
        return bool(np.all(u >= self.u_lo - tol) and np.all(u <= self.u_hi + tol))

    def clip(self, u) -> np.ndarray:
        return np.minimum(np.maximum(u, self.u_lo), self.u_hi)

    def cost_at(self, u, k: int = 0) -> float:
        if self.cost_change is not None and k >= self.cost_change.k:
            return float(self.cost_change.cost(u))
        return float(self.cost(u))

    def cost_grad_at(self, u, k: int = 0) -> np.ndarray:
        if self.cost_change is not None and k >= self.cost_change.k:
            return np.asarray(self.cost_change.cost_grad(u), dtype=float)
        return np.asarray(self.cost_grad(u), dtype=float)

    def phi_star_at(self, k: int = 0) -> float:
        if self.cost_change is not None and k >= self.cost_change.k:
            return self.cost_change.phi_star
        return self.phi_star

    def u_star_at(self, k: int = 0) -> np.ndarray:
        if self.cost_change is not None and k >= self.cost_change.k:
            return self.cost_change.u_star
        return self.u_star

    def with_options(self, **changes) -> "RtoProblem":
        """Shallow copy with some fields replaced."""
        fields = dict(self.__dict__)
        fields.update(changes)
        return RtoProblem(**fields)


def function_ranges(problem: RtoProblem, n_grid: int = 200):
    """Maximal absolute constraint values and cost range on a regular grid over
    the box (2-D problems use an ``n_grid`` x ``n_grid`` lattice)."""
    axes = [np.linspace(lo, hi, n_grid) for lo, hi in zip(problem.u_lo, problem.u_hi)]
    pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, problem.n_u)
    g = np.array([problem.constraints(p) for p in pts]) if not hasattr(problem.constraints, "batch") \
        else problem.constraints.batch(pts)
    phi = np.array([problem.cost(p) for p in pts]) if not hasattr(problem.cost, "batch") \
        else problem.cost.batch(pts)
    g_range = np.max(np.abs(g), axis=0)
    phi_range = float(np.max(phi) - np.min(phi))
    return np.where(g_range > 0, g_range, 1.0), (phi_range if phi_range > 0 else 1.0)


def find_plant_optimum(cost, cost_grad, constraints, constraints_jac, u_lo, u_hi,
                       step: float = 1e-3, tol: float = 1e-10):
    """Global feasible minimizer by a dense grid scan followed by a local polish.

    Returns ``(u_star, phi_star)``.
    """
    u_lo, u_hi = np.asarray(u_lo, float), np.asarray(u_hi, float)
    axes = [np.linspace(lo, hi, int(round((hi - lo) / step)) + 1) for lo, hi in zip(u_lo, u_hi)]
    pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, len(u_lo))
    g = constraints.batch(pts) if hasattr(constraints, "batch") else np.array([constraints(p) for p in pts])
    phi = cost.batch(pts) if hasattr(cost, "batch") else np.array([cost(p) for p in pts])
    feas = np.all(g <= 0, axis=1)
    if not np.any(feas):
        raise ValueError("no feasible grid point")
    start = pts[feas][np.argmin(phi[feas])]
    res = minimize(cost, start, jac=cost_grad, method="SLSQP",
                   bounds=list(zip(u_lo, u_hi)),
                   constraints=[{"type": "ineq", "fun": lambda u: -constraints(u),
                                 "jac": lambda u: -constraints_jac(u)}],
                   options={"ftol": tol, "maxiter": 500})
    u = _restore_feasibility(np.clip(res.x, u_lo, u_hi), constraints, constraints_jac, u_lo, u_hi)
    if np.all(constraints(u) <= 0) and cost(u) <= cost(start):
        return u, float(cost(u))
    return start, float(cost(start))


def _restore_feasibility(u, constraints, constraints_jac, u_lo, u_hi, iters: int = 20):
    # SLSQP stops on the boundary up to roundoff; Newton steps on the violated
    # constraints (aiming slightly inside) move it back to the feasible side
    for _ in range(iters):
        g = constraints(u)
        bad = g > 0
        if not bad.any():
            break
        J = np.atleast_2d(constraints_jac(u))[bad]
        step = np.linalg.lstsq(J, g[bad] + 1e-14 * (1.0 + np.abs(g[bad])), rcond=None)[0]
        u = np.clip(u - step, u_lo, u_hi)
    return u


class History:
    """Append-only arrays of past iterates and their measurements."""

    def __init__(self, n_u: int, n_g: int, capacity: int = 64):
        self.n_u, self.n_g = n_u, n_g
        self.size = 0
        self.u = np.empty((capacity, n_u))
        self.g_meas = np.empty((capacity, n_g))
        self.g_upper = np.empty((capacity, n_g))
        self.phi_meas = np.empty(capacity)
        self.k = np.empty(capacity, dtype=np.int64)
        self._run = 0

    def _grow(self):
        cap = 2 * self.u.shape[0]
        for name in ("u", "g_meas", "g_upper", "phi_meas", "k"):
            old = getattr(self, name)
            new = np.empty((cap,) + old.shape[1:], dtype=old.dtype)
            new[: self.size] = old[: self.size]
            setattr(self, name, new)

    def append(self, k, u, g_meas, phi_meas, g_upper=None):
        if self.size and k <= self.k[self.size - 1]:
            raise ValueError("history indices must be strictly increasing")
        if self.size == self.u.shape[0]:
            self._grow()
        i = self.size
        self.u[i] = u
        self.g_meas[i] = g_meas
        self.phi_meas[i] = phi_meas
        self.g_upper[i] = np.nan if g_upper is None else g_upper
        self.k[i] = k
        self._run = self._run + 1 if i and np.array_equal(self.u[i - 1], self.u[i]) else 1
        self.size += 1

    def repeat_count(self) -> int:
        """Length of the trailing run of entries at exactly the latest point."""
        return self._run

    def __len__(self):
        return self.size


@dataclass
class IterateState:
    """Everything the supervisor knows at iteration ``k``."""

    k: int
    u: np.ndarray
    history: History
    g_upper: np.ndarray = None
    grad_boxes: object = None
    slack: object = None
    qbound: object = None
    # diagnostics of the previous iteration (a starting guess for the searches)
    previous: object = None


@dataclass
class TraceRecord:
    k: int
    u: np.ndarray
    phi_true: float
    g_true: np.ndarray
    phi_meas: float
    g_meas: np.ndarray
    K: float
    P: float
    eps_min: float
    variant: str
    d: np.ndarray
    phi_star: float
    binding: str = ""
    status: str = ""
    ref_k: int = -1
    box_lo: np.ndarray = None
    box_hi: np.ndarray = None


@dataclass
class CampaignTrace:
    records: list = field(default_factory=list)
    phi_star: float = np.nan
    u_star: np.ndarray = None

    def __len__(self):
        return len(self.records)

    def array(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records])


def apply_input_filter(u_k, u_target, K: float) -> np.ndarray:
    """Move from ``u_k`` a fraction ``K`` of the way to ``u_target``."""
    u_k = np.asarray(u_k, dtype=float)
    u_target = np.asarray(u_target, dtype=float)
    if u_k.shape != u_target.shape:
        raise ValueError(f"dimension mismatch: {u_k.shape} vs {u_target.shape}")
    if not 0.0 <= K <= 1.0:
        raise ValueError(f"filter gain {K} outside [0, 1]")
    return u_k + K * (u_target - u_k)


def optimality_loss(trace: CampaignTrace) -> float:
    """Sum of true cost gaps to the optimum over all recorded iterates."""
    if len(trace) == 0:
        raise ValueError("empty trace")
    total = 0.0
    for r in trace.records:
        star = r.phi_star if np.isfinite(r.phi_star) else trace.phi_star
        if not (np.isfinite(r.phi_true) and np.isfinite(star)):
            raise ValueError(f"missing true cost at record k={r.k}")
        total += r.phi_true - star
    return float(total)
