"""Filter gain selection: feasibility and cost-decrease limits, line searches,
and the soft-constraint slack schedule."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.optimize import minimize_scalar

from .uncertainty import GradientBox, LipschitzTable, QBoundState, growth_from_points, quad_form_upper, \
    worst_case_directional

__all__ = [
    "COST_GAIN_FACTOR",
    "K_ZERO",
    "SlackState",
    "beta_max",
    "compose_gain",
    "fallback_reference",
    "gain_cost_decrease",
    "gain_feasibility",
    "line_search_known_cost",
    "slack_step",
    "union_line_search",
]

COST_GAIN_FACTOR = 1.99
K_ZERO = 1e-8
N_SAMPLES = 1024
BISECT_TOL = 1e-9


@dataclass(frozen=True)
class SlackState:
    """Allowed violations ``d`` (zero for hard constraints), the violation
    budgets ``d_total`` and the reduction factors ``beta``."""

    d: np.ndarray
    d_total: np.ndarray
    beta: np.ndarray
    d0: np.ndarray

    def __post_init__(self):
        for name in ("d", "d_total", "beta", "d0"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        if np.any(self.d < 0) or np.any(self.d > self.d0 + 1e-15):
            raise ValueError("need 0 <= d <= d0")
        if np.any(self.beta < 0) or np.any(self.beta >= 1):
            raise ValueError("beta must lie in [0, 1)")
        soft = self.d0 > 0
        if np.any(self.beta[soft] > beta_max(self.d0[soft], self.d_total[soft]) + 1e-15):
            raise ValueError("beta exceeds the budget-preserving maximum")

    @classmethod
    def hard(cls, n_g: int) -> "SlackState":
        z = np.zeros(n_g)
        return cls(z, z, z, z)

    @classmethod
    def from_level(cls, level: float, eps_bar, budget_ratio: float = 10.0, soft=None) -> "SlackState":
        """Initial slack ``level * eps_bar`` with budget ``budget_ratio`` times that,
        reducing at the largest admissible rate."""
        eps_bar = np.asarray(eps_bar, dtype=float)
        soft = np.ones(eps_bar.shape, bool) if soft is None else np.asarray(soft, bool)
        d0 = np.where(soft, level * eps_bar, 0.0)
        if level <= 0:
            return cls.hard(eps_bar.shape[0])
        d_total = budget_ratio * d0
        beta = np.where(d0 > 0, beta_max(np.where(d0 > 0, d0, 1.0), np.where(d0 > 0, d_total, 1.0)), 0.0)
        return cls(d0.copy(), d_total, beta, d0)

    @property
    def soft(self) -> np.ndarray:
        return self.d0 > 0


def gain_feasibility(g_upper, growth, slack=None) -> float:
    """Largest gain keeping every constraint below its allowed violation under
    the worst-case growth; constraints that cannot grow impose no limit.

    ``slack`` is a :class:`SlackState` or directly the allowed violations.
    """
    g_upper = np.asarray(g_upper, dtype=float)
    growth = np.asarray(growth, dtype=float)
    if slack is None:
        d = np.zeros_like(g_upper)
    else:
        d = slack.d if isinstance(slack, SlackState) else np.asarray(slack, dtype=float)
    limiting = growth > 0
    if not limiting.any():
        return np.inf
    ratio = (d[limiting] - g_upper[limiting]) / growth[limiting]
    return float(max(0.0, np.min(ratio)))


def gain_cost_decrease(cost_box: GradientBox, q: QBoundState, delta_u, factor: float = COST_GAIN_FACTOR) -> float:
    """Gain guaranteeing a cost decrease under the quadratic upper bound."""
    slope = worst_case_directional(cost_box, delta_u)
    if slope >= 0:
        raise ValueError(f"step is not a certified descent direction (slope {slope:.3e})")
    curv = quad_form_upper(q, delta_u)
    if curv <= 0:
        return np.inf
    return -factor * slope / curv


def compose_gain(k_feas: float, k_cost: float) -> float:
    """Smaller of the two limits, clamped to one."""
    if k_feas < 0 or k_cost < 0:
        raise ValueError("gain limits must be nonnegative")
    return float(min(k_feas, k_cost, 1.0))


def _largest_member(K_grid, member, test) -> float:
    """Largest sampled member refined toward the next (nonmember) sample by
    bisection; ``test(K)`` re-evaluates membership pointwise."""
    idx = np.flatnonzero(member)
    if idx.size == 0:
        return 0.0
    i = idx[-1]
    lo = K_grid[i]
    if i == len(K_grid) - 1:
        return float(lo)
    hi = K_grid[i + 1]
    while hi - lo > BISECT_TOL:
        mid = 0.5 * (lo + hi)
        if test(mid):
            lo = mid
        else:
            hi = mid
    return float(lo)


def union_line_search(u_k, u_bar, history, lip: LipschitzTable, g_upper, slack: SlackState = None,
                      local_gain: float = None, local_growth=None) -> float:
    """Largest gain in ``[0, 1]`` whose end point is certified feasible, for
    every constraint, by the Lipschitz envelope of at least one past point.

    The current point's own envelope uses ``local_growth`` (the worst-case
    growth along the full step, possibly concavity-relaxed) when given;
    ``local_gain`` is a lower bound on the result.
    """
    u_k = np.asarray(u_k, dtype=float)
    delta = np.asarray(u_bar, dtype=float) - u_k
    if not np.any(delta):
        raise ValueError("union search needs a nonzero step")
    g_upper = np.asarray(g_upper, dtype=float)
    d = np.zeros_like(g_upper) if slack is None else slack.d
    if local_growth is None:
        local_growth = growth_from_points(lip, delta[None])[0]
    if local_gain is None:
        local_gain = gain_feasibility(g_upper, local_growth, slack)
    local_gain = min(1.0, local_gain)

    n = history.size
    rec_u = history.u[:n]
    rec_g = history.g_upper[:n]
    useful = np.all(np.isfinite(rec_g), axis=1) & np.any(rec_g < d[None], axis=1)
    rec_u, rec_g = rec_u[useful], rec_g[useful]

    def certified(K):
        K = np.atleast_1d(K)
        pts = u_k[None] + K[:, None] * delta[None]
        # local envelope scales linearly with K (positively homogeneous growth)
        local_ok = g_upper[None] + K[:, None] * local_growth[None] <= d[None]
        deltas = pts[:, None, :] - rec_u[None, :, :]
        growth = np.sum(np.maximum(lip.kappa_lo[None, None] * deltas[:, :, None, :],
                                   lip.kappa_hi[None, None] * deltas[:, :, None, :]), axis=3)
        rec_ok = rec_g[None] + growth <= d[None, None, :]
        return np.all(local_ok | np.any(rec_ok, axis=1), axis=1)

    K_grid = np.linspace(0.0, 1.0, N_SAMPLES + 1)[1:]
    member = certified(K_grid)
    best = _largest_member(K_grid, member, lambda K: bool(certified(K)[0]))
    return float(max(local_gain, best))


def line_search_known_cost(u_k, u_bar, known_cost, gain_cap: float, known_constraints=None,
                           convex=None) -> float:
    """Gain along ``u_bar - u_k`` for known problem elements.

    With a known cost, return the minimizer of ``known_cost`` over
    ``K in [0, min(1, gain_cap)]`` among end points satisfying the known
    constraints. With ``known_cost=None``, return the largest such ``K``.
    Returns 0 when no admissible gain improves on ``u_k``.

    ``known_constraints`` maps a batch of points (N, n_u) to values (N, m);
    ``convex`` flags which of those are convex, for which feasibility at the
    cap certifies every smaller gain.
    """
    u_k = np.asarray(u_k, dtype=float)
    delta = np.asarray(u_bar, dtype=float) - u_k
    cap = float(min(1.0, gain_cap))
    if cap <= 0 or not np.any(delta):
        return 0.0

    def feasible(K):
        K = np.atleast_1d(K)
        if known_constraints is None:
            return np.ones(K.shape, dtype=bool)
        pts = u_k[None] + K[:, None] * delta[None]
        g = np.atleast_2d(known_constraints(pts))
        if convex is not None:
            cvx = np.asarray(convex, dtype=bool)
            if cvx.any():
                end = np.atleast_2d(known_constraints((u_k + cap * delta)[None]))[0]
                if np.all(end[cvx] <= 0):
                    g = g[:, ~cvx]
        return np.all(g <= 0, axis=1)

    K_grid = np.linspace(0.0, cap, N_SAMPLES + 1)[1:]
    ok = feasible(K_grid)
    if known_cost is None:
        return _largest_member(K_grid, ok, lambda K: bool(feasible(K)[0]))

    pts = u_k[None] + K_grid[:, None] * delta[None]
    phi = np.array([known_cost(p) for p in pts]) if not hasattr(known_cost, "batch") else known_cost.batch(pts)
    phi0 = float(known_cost(u_k))
    phi = np.where(ok, phi, np.inf)
    i = int(np.argmin(phi))
    if not np.isfinite(phi[i]) or phi[i] >= phi0:
        return 0.0
    lo = K_grid[i - 1] if i > 0 else 0.0
    hi = K_grid[i + 1] if i + 1 < len(K_grid) else cap
    res = minimize_scalar(lambda K: float(known_cost(u_k + K * delta)), bounds=(lo, hi), method="bounded",
                          options={"xatol": 1e-12})
    K = float(res.x)
    if feasible(K)[0] and res.fun <= phi[i]:
        return K
    return float(K_grid[i])


def slack_step(slack: SlackState, g_upper_at_uk) -> SlackState:
    """Shrink the slack of every soft constraint whose bound is nonnegative."""
    hit = slack.soft & (np.asarray(g_upper_at_uk) >= 0)
    if not hit.any():
        return slack
    return replace(slack, d=np.where(hit, slack.beta * slack.d, slack.d))


def beta_max(d0, d_total):
    """Largest reduction factor that keeps the violation integral within budget."""
    d0 = np.asarray(d0, dtype=float)
    d_total = np.asarray(d_total, dtype=float)
    if np.any(d0 <= 0) or np.any(d_total < d0):
        raise ValueError("need d_total >= d0 > 0")
    out = (d_total - d0) / d_total
    return float(out) if out.ndim == 0 else out


def fallback_reference(history, slack: SlackState, g_upper_now=None) -> int:
    """History index to step from when the current point breaks the reduced slack.

    Returns the latest index when no soft constraint is violated; otherwise the
    qualifying point with the best measured cost, where qualifying means every
    soft bound lies strictly below its reduced slack. Index 0 (the initial
    point) is the guaranteed fallback.
    """
    n = history.size
    soft = slack.soft
    now = history.g_upper[n - 1] if g_upper_now is None else np.asarray(g_upper_now)
    if not np.any(soft & (now >= slack.d)):
        return n - 1
    g = history.g_upper[:n]
    ok = np.all((g[:, soft] < slack.d[soft][None]), axis=1)
    ok[0] = True
    idx = np.flatnonzero(ok)
    return int(idx[np.argmin(history.phi_meas[idx])])
