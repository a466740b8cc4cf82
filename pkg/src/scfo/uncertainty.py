"""Bounds on gradients, constraint values and cost curvature."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numba as nb
import numpy as np

__all__ = [
    "GradientBox",
    "GradientSet",
    "LipschitzTable",
    "NoiseModel",
    "QBoundState",
    "adapt_qbound",
    "build_gradient_box",
    "constraint_upper_bound",
    "constraint_upper_bounds",
    "epsilon_active_set",
    "feasible_polytope_contains",
    "growth_from_points",
    "lipschitz_growth",
    "quad_form_upper",
    "shrink_box",
    "worst_case_directional",
]


@dataclass(frozen=True)
class GradientBox:
    """Componentwise bounds ``lo <= grad <= hi`` around an estimate."""

    lo: np.ndarray
    hi: np.ndarray
    estimate: np.ndarray

    def __post_init__(self):
        for name in ("lo", "hi", "estimate"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        if not (self.lo.shape == self.hi.shape == self.estimate.shape):
            raise ValueError("box vectors must share one shape")
        if not (np.all(np.isfinite(self.lo)) and np.all(np.isfinite(self.hi))):
            raise ValueError("box bounds must be finite")
        tol = 1e-12 * (1.0 + np.abs(self.estimate))
        if np.any(self.lo > self.estimate + tol) or np.any(self.estimate > self.hi + tol):
            raise ValueError("box must satisfy lo <= estimate <= hi")

    @classmethod
    def exact(cls, grad) -> "GradientBox":
        g = np.asarray(grad, dtype=float)
        if not np.isfinite(g).all():
            raise ValueError("box bounds must be finite")
        return cls._unchecked(g, g, g)

    @classmethod
    def _unchecked(cls, lo, hi, estimate) -> "GradientBox":
        # for boxes derived from an already validated one
        out = object.__new__(cls)
        object.__setattr__(out, "__dict__", {"lo": lo, "hi": hi, "estimate": estimate})
        return out

    @property
    def width(self) -> np.ndarray:
        return self.hi - self.lo

    @property
    def degenerate(self) -> bool:
        return bool(np.all(self.hi == self.lo))

    def contains(self, grad, tol: float = 0.0) -> bool:
        return bool(np.all(grad >= self.lo - tol) and np.all(grad <= self.hi + tol))

    def vertices(self) -> np.ndarray:
        """All ``2**n`` corner gradients."""
        n = self.lo.shape[0]
        bits = (np.arange(2 ** n)[:, None] >> np.arange(n)) & 1
        return np.where(bits == 1, self.hi, self.lo)


@dataclass(frozen=True)
class GradientSet:
    """Gradient boxes for the cost and for every constraint at one point."""

    cost: GradientBox
    constraints: tuple

    def shrink(self, P: float) -> "GradientSet":
        return GradientSet(shrink_box(self.cost, P), tuple(shrink_box(b, P) for b in self.constraints))

    def collapsed(self) -> "GradientSet":
        return self.shrink(0.0)

    @property
    def degenerate(self) -> bool:
        return self.cost.degenerate and all(b.degenerate for b in self.constraints)

    @property
    def constraint_estimates(self) -> np.ndarray:
        return np.array([b.estimate for b in self.constraints])


@dataclass(frozen=True)
class LipschitzTable:
    """Directional derivative bounds ``kappa_lo[j, i] <= dg_j/du_i <= kappa_hi[j, i]``
    plus optional concavity declarations per constraint and input."""

    kappa_lo: np.ndarray
    kappa_hi: np.ndarray
    concave_in: np.ndarray = None

    def __post_init__(self):
        lo = np.atleast_2d(np.asarray(self.kappa_lo, dtype=float))
        hi = np.atleast_2d(np.asarray(self.kappa_hi, dtype=float))
        if lo.shape != hi.shape or np.any(lo > hi):
            raise ValueError("need kappa_lo <= kappa_hi with equal shapes")
        cc = np.zeros(lo.shape, dtype=bool) if self.concave_in is None else np.asarray(self.concave_in, dtype=bool)
        if cc.shape != lo.shape:
            raise ValueError("concave_in must match the table shape")
        object.__setattr__(self, "kappa_lo", lo)
        object.__setattr__(self, "kappa_hi", hi)
        object.__setattr__(self, "concave_in", cc)

    @classmethod
    def symmetric(cls, kappa, concave_in=None) -> "LipschitzTable":
        kappa = np.atleast_2d(np.asarray(kappa, dtype=float))
        if np.any(kappa < 0):
            raise ValueError("Lipschitz constants must be nonnegative")
        return cls(-kappa, kappa, concave_in)

    @property
    def shape(self):
        return self.kappa_lo.shape

    def with_concavity(self, concave_in) -> "LipschitzTable":
        return replace(self, concave_in=np.asarray(concave_in, dtype=bool))


@dataclass(frozen=True)
class QBoundState:
    """Quadratic upper bound on cost curvature, optionally with elementwise
    Hessian bounds ``M_lo <= hess <= M_hi`` and the adaptive doubling state."""

    Q: np.ndarray
    M_lo: np.ndarray = None
    M_hi: np.ndarray = None
    n: int = 0
    adaptive: bool = False

    def __post_init__(self):
        Q = np.atleast_2d(np.asarray(self.Q, dtype=float))
        if not np.allclose(Q, Q.T):
            raise ValueError("Q must be symmetric")
        object.__setattr__(self, "Q", Q)
        if (self.M_lo is None) != (self.M_hi is None):
            raise ValueError("M_lo and M_hi come together")
        if self.M_lo is not None:
            lo, hi = np.asarray(self.M_lo, float), np.asarray(self.M_hi, float)
            if np.any(lo > hi):
                raise ValueError("need M_lo <= M_hi")
            object.__setattr__(self, "M_lo", lo)
            object.__setattr__(self, "M_hi", hi)


@dataclass(frozen=True)
class NoiseModel:
    """Noise description used by the supervisor.

    ``w_lo`` is the per-constraint lower bound on additive measurement noise;
    the bound on the mean of ``n`` repeats is ``w_lo / sqrt(n)``.
    ``sigma_grad`` holds per-function derivative scales (row 0 is the cost,
    rows 1.. the constraints) used to build general-purpose boxes with
    multiplier ``m``.
    """

    w_lo: np.ndarray
    sigma_g: float = 0.0
    sigma: float = 0.0
    sigma_grad: np.ndarray = None
    m: float = 0.0
    cost_noise_std: float = 0.0

    def __post_init__(self):
        w = np.asarray(self.w_lo, dtype=float)
        if np.any(w > 0):
            raise ValueError("noise lower bounds must be nonpositive")
        object.__setattr__(self, "w_lo", w)

    @classmethod
    def gaussian(cls, sigma_g: float, eps_bar, **kw) -> "NoiseModel":
        """Three-sigma lower bound for ``N(0, (sigma_g * eps_bar)^2)`` noise."""
        return cls(w_lo=-3.0 * sigma_g * np.asarray(eps_bar, dtype=float), sigma_g=sigma_g, **kw)

    def mean_lower(self, n: int) -> np.ndarray:
        if n < 1:
            raise ValueError("need at least one measurement")
        return self.w_lo / np.sqrt(n)


def build_gradient_box(estimate, sigma, m: float) -> GradientBox:
    """Box ``estimate +/- m * sigma``."""
    if m < 0:
        raise ValueError("m must be nonnegative")
    estimate = np.asarray(estimate, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    if (sigma < 0).any():
        raise ValueError("sigma must be nonnegative")
    if estimate.shape != np.broadcast_shapes(estimate.shape, sigma.shape):
        raise ValueError("box vectors must share one shape")
    if not (np.isfinite(estimate).all() and np.isfinite(sigma).all()):
        raise ValueError("box bounds must be finite")
    # nonnegative half-widths keep lo <= estimate <= hi by construction
    if m == 0:
        return GradientBox._unchecked(estimate, estimate, estimate)
    return GradientBox._unchecked(estimate - m * sigma, estimate + m * sigma, estimate)


def shrink_box(box: GradientBox, P: float) -> GradientBox:
    """Interpolate the box bounds toward the estimate; ``P = 0`` collapses it."""
    if not 0.0 <= P <= 1.0:
        raise ValueError("P must lie in [0, 1]")
    if P == 1.0:
        return box
    e = box.estimate
    if P == 0.0:
        return GradientBox._unchecked(e, e, e)
    return GradientBox._unchecked(e + P * (box.lo - e), e + P * (box.hi - e), e)


def worst_case_directional(box: GradientBox, delta_u) -> float:
    """Tight supremum of ``g @ delta_u`` over gradients ``g`` in the box."""
    return float(np.sum(np.maximum(box.lo * delta_u, box.hi * delta_u)))


def lipschitz_growth(lip: LipschitzTable, j: int, delta_u, grad_box_j: GradientBox = None,
                     local: bool = True) -> float:
    """Worst-case increase of constraint ``j`` along ``delta_u``.

    Coordinates declared concave (only honoured for ``local`` steps taken from
    the point where ``grad_box_j`` was estimated) contribute the worst case of
    the first-order term instead of the Lipschitz term.
    """
    delta_u = np.asarray(delta_u, dtype=float)
    terms = np.maximum(lip.kappa_lo[j] * delta_u, lip.kappa_hi[j] * delta_u)
    if local and lip.concave_in[j].any():
        if grad_box_j is None:
            raise ValueError(f"constraint {j} has concave inputs but no gradient box was given")
        cc = lip.concave_in[j]
        first = np.maximum(grad_box_j.lo * delta_u, grad_box_j.hi * delta_u)
        terms = np.where(cc, first, terms)
    return float(np.sum(terms))


def growth_from_points(lip: LipschitzTable, deltas) -> np.ndarray:
    """Lipschitz growth (no concavity) for a batch of steps; shape (N, n_g)."""
    d = np.asarray(deltas, dtype=float)[:, None, :]
    return np.sum(np.maximum(lip.kappa_lo[None] * d, lip.kappa_hi[None] * d), axis=2)


@nb.njit(cache=True)
def _envelope_min(past_g, deltas, kappa_lo, kappa_hi):
    """Per-constraint minimum over rows of ``past_g + growth(deltas)``."""
    N, n_g = past_g.shape
    n = deltas.shape[1]
    out = np.full(n_g, np.inf)
    for p in range(N):
        for j in range(n_g):
            v = past_g[p, j]
            for i in range(n):
                d = deltas[p, i]
                v += max(kappa_lo[j, i] * d, kappa_hi[j, i] * d)
            if v < out[j]:
                out[j] = v
    return out


def constraint_upper_bounds(history, noise: NoiseModel, lip: LipschitzTable, cap=None,
                            max_distance: float = np.inf) -> np.ndarray:
    """Upper bounds on all constraint values at the latest history entry.

    The minimum of: ``cap`` (zero for hard constraints); the latest measurement
    corrected by the noise lower bound; the mean over the trailing run of
    repeated measurements at the same point corrected by the bound on a mean;
    and every earlier point's recorded bound grown by the Lipschitz envelope.
    Earlier entries need their ``g_upper`` recorded; entries farther than
    ``max_distance`` (infinity norm) are skipped.
    """
    if len(history) == 0:
        raise ValueError("no measurements")
    last = history.size - 1
    u_k = history.u[last]
    bound = np.zeros(history.n_g) if cap is None else np.array(cap, dtype=float)
    bound = np.minimum(bound, history.g_meas[last] - noise.w_lo)
    n = history.repeat_count()
    if n > 1:
        mean = np.mean(history.g_meas[last - n + 1: last + 1], axis=0)
        bound = np.minimum(bound, mean - noise.mean_lower(n))
    if last > 0:
        past_u = history.u[:last]
        past_g = history.g_upper[:last]
        deltas = u_k[None, :] - past_u
        if np.isfinite(max_distance):
            keep = np.max(np.abs(deltas), axis=1) <= max_distance
            deltas, past_g = deltas[keep], past_g[keep]
        if deltas.shape[0]:
            bound = np.minimum(bound, _envelope_min(past_g, deltas, lip.kappa_lo, lip.kappa_hi))
    return bound


def constraint_upper_bound(j: int, history, noise: NoiseModel, lip: LipschitzTable, cap=None) -> float:
    """Single-constraint view of :func:`constraint_upper_bounds`."""
    return float(constraint_upper_bounds(history, noise, lip, cap)[j])


def epsilon_active_set(g_upper, eps) -> np.ndarray:
    """Indices whose upper bound lies within ``eps`` of the boundary."""
    return np.flatnonzero(np.asarray(g_upper) >= -np.asarray(eps))


def feasible_polytope_contains(record_u, record_g_upper, lip: LipschitzTable, u, j=None,
                               margin=0.0) -> bool:
    """Whether ``u`` is certified feasible (up to ``margin``) by the Lipschitz
    envelope around a past point; ``j=None`` checks every constraint."""
    growth = growth_from_points(lip, (np.asarray(u, float) - np.asarray(record_u, float))[None])[0]
    ok = np.asarray(record_g_upper, float) + growth <= margin
    return bool(ok.all() if j is None else ok[j])


def quad_form_upper(q: QBoundState, delta_u) -> float:
    """Upper bound on ``delta_u @ H @ delta_u`` for admissible cost Hessians ``H``."""
    d = np.asarray(delta_u, dtype=float)
    if q.M_lo is not None:
        outer = np.outer(d, d)
        return float(np.sum(np.maximum(q.M_lo * outer, q.M_hi * outer)))
    return float(d @ q.Q @ d)


def adapt_qbound(q: QBoundState, cost_history, noise_std: float = 0.0) -> QBoundState:
    """Double ``Q`` when the latest cost is confidently no better than the best
    cost since the last doubling.

    Confidence means an increase above three noise standard deviations, or any
    strict increase when measurements are exact.
    """
    if not q.adaptive:
        return q
    k = len(cost_history) - 1
    window = cost_history[q.n:k]
    if len(window) == 0:
        return q
    rise = cost_history[k] - min(window)
    triggered = rise > 3.0 * noise_std if noise_std > 0 else rise > 0
    if not triggered:
        return q
    M_lo = None if q.M_lo is None else 2.0 * q.M_lo
    M_hi = None if q.M_hi is None else 2.0 * q.M_hi
    return QBoundState(2.0 * q.Q, M_lo, M_hi, k, True)
