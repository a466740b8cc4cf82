"""Reference RTO algorithms that propose targets for the supervisor to filter.

All of them work in the problem's own units and only use what a real
campaign would have: the current point, measured costs and constraint
values, and the gradient estimates. The ideal-target scheme is the
exception by design, returning the plant optimum.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .problem import IterateState, RtoProblem

__all__ = ["ALGORITHMS", "AlgorithmSpec", "next_target"]

ALGORITHMS = ("ideal-target", "gradient-descent", "modifier-adaptation", "two-step", "random-step")
SHORT_NAMES = {"IT": "ideal-target", "GD": "gradient-descent", "MA": "modifier-adaptation",
               "TS": "two-step", "RS": "random-step"}


@dataclass(frozen=True)
class AlgorithmSpec:
    """Algorithm kind with its tuning.

    Parameters
    ----------
    kind : str
        One of :data:`ALGORITHMS` (or its two-letter abbreviation).
    step : float
        Gradient-descent step length.
    model_center, model_curvature : tuple
        Separable quadratic cost model ``sum_i c_i (u_i - center_i)^2`` used by
        modifier adaptation (center and curvature) and by the two-step scheme
        (curvature only; the center is fitted).
    fit_window : int
        Number of most recent distinct points used by the two-step fit.
    random_scale : float
        Half-width of random steps as a fraction of the box span.
    """

    kind: str = "ideal-target"
    step: float = 1.0
    model_center: tuple = (0.4, 0.5)
    model_curvature: tuple = (1.25, 0.8)
    fit_window: int = 5
    random_scale: float = 0.2

    def __post_init__(self):
        kind = SHORT_NAMES.get(self.kind, self.kind)
        if kind not in ALGORITHMS:
            raise ValueError(f"unknown algorithm {self.kind!r}")
        object.__setattr__(self, "kind", kind)


def _model_step(u, grad, curvature):
    # minimizer of the separable quadratic model after matching its gradient at u
    return u - grad / (2.0 * np.asarray(curvature, dtype=float))


def _two_step_fit(spec: AlgorithmSpec, state: IterateState, grad):
    h = state.history
    c = np.asarray(spec.model_curvature, dtype=float)
    recent = h.u[: h.size][::-1]
    # only the newest entry of each run of repeats can be a new point
    starts = np.flatnonzero(np.r_[True, np.any(recent[1:] != recent[:-1], axis=1)])
    keep, seen = [], set()
    for i in starts:
        key = recent[i].tobytes()
        if key not in seen:
            seen.add(key)
            keep.append(i)
            if len(keep) == spec.fit_window:
                break
    pts = recent[keep]
    costs = h.phi_meas[: h.size][::-1][keep]
    n_u = state.u.shape[0]
    if len(pts) < n_u + 1:
        return _model_step(state.u, grad, c)
    U = pts
    y = costs - U ** 2 @ c
    X = np.hstack([U, np.ones((U.shape[0], 1))])
    coef, _, rank, _ = np.linalg.lstsq(X, y, rcond=None)
    if rank < n_u + 1:
        return _model_step(state.u, grad, c)
    return -coef[:n_u] / (2.0 * c)


def next_target(spec: AlgorithmSpec, state: IterateState, problem: RtoProblem, rng=None) -> np.ndarray:
    """Target proposed at ``state``; always inside the box.

    ``state.grad_boxes`` must hold the gradient estimates for the kinds that
    use gradients; ``rng`` is required by the random-step scheme.
    """
    u = np.asarray(state.u, dtype=float)
    kind = spec.kind
    if kind == "ideal-target":
        target = problem.u_star_at(state.k)
        if target is None:
            raise ValueError("ideal-target needs the plant optimum")
    elif kind == "gradient-descent":
        target = u - spec.step * state.grad_boxes.cost.estimate
    elif kind == "modifier-adaptation":
        grad = state.grad_boxes.cost.estimate
        center = np.asarray(spec.model_center, dtype=float)
        curv = np.asarray(spec.model_curvature, dtype=float)
        # first-order modifier: plant-minus-model gradient at u
        modifier = grad - 2.0 * curv * (u - center)
        target = center - modifier / (2.0 * curv)
    elif kind == "two-step":
        target = _two_step_fit(spec, state, state.grad_boxes.cost.estimate)
    else:
        if rng is None:
            raise ValueError("random-step needs an rng")
        span = problem.u_hi - problem.u_lo
        target = u + spec.random_scale * span * rng.uniform(-1.0, 1.0, u.shape)
    target = np.asarray(target, dtype=float)
    if not np.all(np.isfinite(target)):
        target = u
    return problem.clip(target)
