"""Per-iteration scheduling of the projection parameters and the campaign loop.

Each iteration starts from the widest back-offs and full robustness, halves
the back-offs until the projection built from the gradient estimates is
feasible, then lowers the robustness level in fixed steps until the robust
projection is feasible, solves it, and picks the filter gain.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .algorithms import AlgorithmSpec, next_target
from .problem import CampaignTrace, History, IterateState, RtoProblem, TraceRecord, apply_input_filter
from .projection import ProjectionParams, descent_rows, rows_feasible, solve_rows
from .qp import Infeasible
from .simulation import inject_constraint_noise, inject_gradient_noise
from .step import COST_GAIN_FACTOR, K_ZERO, SlackState, compose_gain, fallback_reference, gain_cost_decrease, \
    gain_feasibility, line_search_known_cost, slack_step, union_line_search
from .uncertainty import GradientBox, GradientSet, LipschitzTable, NoiseModel, QBoundState, adapt_qbound, \
    build_gradient_box, constraint_upper_bounds, epsilon_active_set, lipschitz_growth

__all__ = [
    "IMPLEMENTATIONS",
    "POLICIES",
    "CampaignConfig",
    "Converged",
    "IterationDiagnostics",
    "PerturbationRequested",
    "SupervisorConfig",
    "max_robust_m",
    "robustness_levels",
    "run_campaign",
    "run_iteration",
    "select_robustness_level", "supervisor_config",
]

POLICIES = ("partial-robustness", "declare-convergence", "perturb-and-refine")


@dataclass
class IterationDiagnostics:
    K: float = 0.0
    P: float = 1.0
    eps_level: float = 1.0
    variant: str = "standard"
    binding: str = ""
    status: str = "ok"
    halvings: int = 0
    k_feas: float = np.nan
    k_cost: float = np.nan
    m: float = np.nan
    u_bar: np.ndarray = None
    boxes: GradientSet = None


class Converged(Exception):
    """No admissible descent direction down to the back-off floors."""

    def __init__(self, diagnostics: IterationDiagnostics):
        super().__init__("declared convergence")
        self.diagnostics = diagnostics


class PerturbationRequested(Exception):
    """The robust projection stays infeasible; tighter gradient bounds are needed."""

    def __init__(self, diagnostics: IterationDiagnostics):
        super().__init__("gradient refinement requested")
        self.diagnostics = diagnostics


@dataclass(frozen=True)
class SupervisorConfig:
    """Supervisor settings.

    Parameters
    ----------
    params : ProjectionParams
        Back-off ceilings and floors.
    lipschitz : LipschitzTable
        Derivative bounds (and concavity declarations) for every constraint.
    p_step : float
        Decrement of the robustness level.
    m_mode : bool
        Size general-purpose boxes ``estimate +/- m * sigma_grad`` each
        iteration from the largest feasible multiplier.
    m_fraction, m_max : float
        Fraction of the largest feasible multiplier that is used, and the cap
        on that multiplier.
    sigma_grad : array (1 + n_g, n_u), optional
        Derivative scales for ``m_mode``; row 0 is the cost.
    policy : str
        What to do when the back-offs reach their floors: one of :data:`POLICIES`.
    reuse_history : bool
        Relax the feasibility gain with the envelopes of past points.
    gain_factor : float
        Factor of the cost-decrease gain (strictly below 2).
    robust_cost_gain : bool
        Use the full boxes instead of the shrunk ones in the cost-decrease gain.
    k_zero : float
        Gains below this count as zero for the known-element fallbacks.
    known_tol : float
        Relative band (times the constraint range) in which a known constraint
        counts as active.
    """

    params: ProjectionParams
    lipschitz: LipschitzTable
    p_step: float = 0.05
    m_mode: bool = False
    m_fraction: float = 0.5
    m_max: float = 1e3
    sigma_grad: Optional[np.ndarray] = None
    policy: str = "partial-robustness"
    reuse_history: bool = False
    gain_factor: float = COST_GAIN_FACTOR
    robust_cost_gain: bool = False
    k_zero: float = K_ZERO
    known_tol: float = 1e-9

    def __post_init__(self):
        if self.policy not in POLICIES:
            raise ValueError(f"unknown policy {self.policy!r}")
        if not 0 < self.m_fraction <= 1:
            raise ValueError("m_fraction must lie in (0, 1]")
        if not 0 < self.p_step < 1:
            raise ValueError("p_step must lie in (0, 1)")
        if self.m_mode and self.sigma_grad is None:
            raise ValueError("m_mode needs sigma_grad")

    @property
    def p_levels(self) -> np.ndarray:
        """Robustness levels tried, from 1 down to 0."""
        return robustness_levels(self.p_step)


def robustness_levels(p_step: float) -> np.ndarray:
    """The grid ``1, 1 - p_step, ...`` down to 0 (0 always included)."""
    n = int(round(1.0 / p_step))
    levels = 1.0 - p_step * np.arange(n + 1)
    return np.append(levels[levels > 1e-12], 0.0)


def _box_bounds(problem):
    return problem.u_lo, problem.u_hi


def _first_true(test, n: int, hint=None) -> int:
    """Smallest ``i`` in ``0..n`` with ``test(i)`` for a test that switches
    from false to true once; ``n + 1`` when it never does.

    The search gallops outward from ``hint`` before bisecting, so an answer
    equal to the hint costs two evaluations and a nearby one a few more.
    """
    lo, hi = -1, n + 1
    if hint is not None and 0 <= hint <= n:
        step = 1
        if test(hint):
            hi = hint
            while hi > 0:
                probe = max(hi - step, 0)
                if test(probe):
                    hi = probe
                    step *= 2
                else:
                    lo = probe
                    break
        else:
            lo = hint
            while lo < n:
                probe = min(lo + step, n)
                if test(probe):
                    hi = probe
                    break
                lo = probe
                step *= 2
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if test(mid):
            hi = mid
        else:
            lo = mid
    return hi


def select_robustness_level(u_k, grads: GradientSet, active, params: ProjectionParams, box, p_step: float = 0.05,
                            cost: str = "box", cost_grad=None, known_grads=None, known_active=(),
                            hint=None) -> float:
    """Highest level on the ``1, 1 - p_step, ..., 0`` grid at which the robust
    projection is feasible (level 0 is always accepted).

    Shrinking the boxes only removes gradients to guard against, so
    feasibility is monotone in the level and a bisection over the grid gives
    the same answer as walking down from 1. ``hint`` is a guess of the
    number of steps down from 1 (typically the previous iteration's).
    """
    u_lo, u_hi = box
    levels = robustness_levels(p_step)

    def feasible(i):
        rows = descent_rows(grads.shrink(levels[i]), active, params, cost=cost, cost_grad=cost_grad,
                            known_grads=known_grads, known_active=known_active)
        return rows_feasible(u_k, rows, u_lo, u_hi)

    # count steps down from full robustness; the last level is accepted unchecked
    drop = _first_true(feasible, len(levels) - 2, hint)
    return float(levels[min(drop, len(levels) - 1)])


def max_robust_m(u_k, estimates: GradientSet, sigma_grad, active, params: ProjectionParams, box,
                 m_max: float = 1e3, tol: float = 1e-4, cost: str = "box", cost_grad=None,
                 known_grads=None, known_active=()) -> float:
    """Largest multiplier ``m`` for which boxes ``estimate +/- m * sigma`` still
    admit a robust descent direction, by doubling then bisection down to a
    bracket of ``tol * |sigma|``.

    Returns ``m_max`` when every multiplier up to it is feasible (in
    particular for zero scales).
    """
    sigma_grad = np.asarray(sigma_grad, dtype=float)
    u_lo, u_hi = box

    def feasible(m):
        boxes = _scaled_boxes(estimates, sigma_grad, m)
        rows = descent_rows(boxes, active, params, cost=cost, cost_grad=cost_grad,
                            known_grads=known_grads, known_active=known_active)
        return rows_feasible(u_k, rows, u_lo, u_hi)

    if not np.any(sigma_grad):
        return float(m_max)
    lo, hi = 0.0, 1.0
    while feasible(hi):
        lo = hi
        if hi >= m_max:
            return float(m_max)
        hi = min(2.0 * hi, m_max)
    width = tol * float(np.linalg.norm(sigma_grad))
    while hi - lo > width:
        mid = 0.5 * (lo + hi)
        if feasible(mid):
            lo = mid
        else:
            hi = mid
    return float(lo)


def _scaled_boxes(estimates: GradientSet, sigma_grad, m) -> GradientSet:
    cost = build_gradient_box(estimates.cost.estimate, sigma_grad[0], m)
    cons = tuple(build_gradient_box(b.estimate, s, m) for b, s in zip(estimates.constraints, sigma_grad[1:]))
    return GradientSet(cost, cons)


# ---------------------------------------------------------------------------
# one iteration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class _Variant:
    name: str
    cost: str               # "box", "exact" or "none"
    known_rows: bool        # exact rows for active known constraints
    search: str             # "gain", "min-cost" or "max-gain"


def _variants(problem: RtoProblem):
    has_known_g = bool(problem.known_constraints.any())
    if problem.known_cost:
        seq = [_Variant("known-cost", "none", False, "min-cost"),
               _Variant("known-cost-exact", "exact", False, "min-cost")]
        if has_known_g:
            seq.append(_Variant("known-all", "exact", True, "min-cost"))
        return seq
    if has_known_g:
        return [_Variant("standard", "box", False, "max-gain"),
                _Variant("known-constraints", "box", True, "max-gain")]
    return [_Variant("standard", "box", False, "gain")]


def _search_hint(state, cfg):
    # previous halving count and robustness steps; any hint gives the same answer
    prev = getattr(state, "previous", None)
    if prev is None:
        return 0, 0
    return prev.halvings, int(round((1.0 - prev.P) / cfg.p_step)) if np.isfinite(prev.P) else 0


class _Infeasible(Exception):
    def __init__(self, params, halvings):
        self.params, self.halvings = params, halvings


def run_iteration(state: IterateState, target, cfg: SupervisorConfig, problem: RtoProblem):
    """One supervised step from ``state.u`` toward ``target``.

    ``state`` must carry the constraint upper bounds (``g_upper``), the
    gradient boxes at ``state.u`` (``grad_boxes``; their estimates are used
    for the nominal check), the slack and the quadratic bound. Returns
    ``(u_next, diagnostics)``.

    Raises
    ------
    Converged
        The back-offs reached their floors without a feasible projection
        (or the policy forbids lowering robustness).
    PerturbationRequested
        Same situation under the perturb-and-refine policy.
    """
    u_k = np.asarray(state.u, dtype=float)
    target = np.asarray(target, dtype=float)
    if not problem.in_box(target):
        raise ValueError("target outside the box")
    box = _box_bounds(problem)
    g_upper = np.asarray(state.g_upper, dtype=float)
    slack = state.slack if state.slack is not None else SlackState.hard(problem.n_g)
    q = state.qbound if state.qbound is not None else QBoundState(problem.cost_hessian_bound)
    uncertain = problem.uncertain
    known = problem.known_constraints
    k = state.k

    cost_grad_exact = problem.cost_grad_at(u_k, k) if problem.known_cost else None
    known_grads = problem.constraints_jac(u_k) if known.any() else None
    known_active = np.flatnonzero(known & (np.abs(g_upper) <= cfg.known_tol * cfg.params.eps_bar))

    variants = _variants(problem)
    diag = IterationDiagnostics()
    for v_index, variant in enumerate(variants):
        last = v_index == len(variants) - 1
        diag = IterationDiagnostics(variant=variant.name)
        try:
            u_bar, params, grads, diag = _project(u_k, target, state.grad_boxes, g_upper, uncertain, known_grads,
                                                  known_active if variant.known_rows else (), variant,
                                                  cfg, box, diag, cost_grad_exact, _search_hint(state, cfg))
        except _Infeasible as exc:
            diag.eps_level = exc.params.eps_level
            diag.halvings = exc.halvings
            diag.status = "converged" if cfg.policy != "perturb-and-refine" else "perturb"
            diag.binding = "converged"
            if cfg.policy == "perturb-and-refine":
                raise PerturbationRequested(diag)
            raise Converged(diag)

        delta = u_bar - u_k
        diag.u_bar = u_bar
        if not np.any(delta):
            diag.K, diag.binding = 0.0, "null-step"
            if last:
                return u_k.copy(), diag
            continue

        full = state.grad_boxes if not cfg.m_mode else grads.full
        growth = np.zeros(problem.n_g)
        for j in np.flatnonzero(uncertain):
            growth[j] = lipschitz_growth(cfg.lipschitz, j, delta, full.constraints[j])
        gu = g_upper[uncertain]
        k_feas = gain_feasibility(gu, growth[uncertain], slack.d[uncertain])
        binding_feas = "feasibility"
        if cfg.reuse_history:
            relaxed = union_line_search(u_k, u_bar, state.history, cfg.lipschitz, g_upper, slack,
                                        local_gain=k_feas, local_growth=growth)
            if relaxed > min(k_feas, 1.0):
                binding_feas = "union-relaxed"
            k_feas = relaxed
        diag.k_feas = k_feas

        if variant.search in ("gain", "max-gain"):
            cost_box = grads.shrunk.cost if not cfg.robust_cost_gain else full.cost
            if variant.cost == "exact":
                cost_box = GradientBox.exact(cost_grad_exact)
            try:
                k_cost = gain_cost_decrease(cost_box, q, delta, cfg.gain_factor)
            except ValueError:
                k_cost = 0.0
            diag.k_cost = k_cost
        if variant.search == "gain":
            K = compose_gain(k_feas, k_cost)
            diag.binding = "clamp" if K == 1.0 else (binding_feas if k_feas <= k_cost else "cost")
        elif variant.search == "max-gain":
            K = line_search_known_cost(u_k, u_bar, None, min(k_feas, k_cost), _known_batch(problem),
                                       problem.convex_constraints[known])
            diag.binding = "line-search"
        else:
            cost_fn = _cost_fn(problem, k)
            K = line_search_known_cost(u_k, u_bar, cost_fn, k_feas,
                                       _known_batch(problem) if known.any() else None,
                                       problem.convex_constraints[known] if known.any() else None)
            diag.binding = "line-search"
        diag.K = K
        if K >= cfg.k_zero or last:
            u_next = apply_input_filter(u_k, u_bar, K)
            return problem.clip(u_next), diag
    return u_k.copy(), diag


@dataclass
class _Grads:
    full: GradientSet
    shrunk: GradientSet


def _known_batch(problem):
    known = problem.known_constraints
    cons = problem.constraints

    def f(pts):
        if hasattr(cons, "batch"):
            return cons.batch(pts)[:, known]
        return np.array([cons(p)[known] for p in pts])
    return f


def _cost_fn(problem, k):
    if problem.cost_change is not None and k >= problem.cost_change.k:
        return problem.cost_change.cost
    return problem.cost


def _project(u_k, target, boxes: GradientSet, g_upper, uncertain, known_grads, known_active, variant, cfg,
             box, diag, cost_grad_exact, hint=(0, 0)):
    """Back-off halving, robustness search and the final projection."""
    estimates = boxes.collapsed()
    # the declare/perturb policies never lower robustness, so they halve on the robust system
    check_boxes = estimates if (cfg.policy == "partial-robustness" or cfg.m_mode) else boxes
    kw = dict(cost=variant.cost, cost_grad=cost_grad_exact, known_grads=known_grads, known_active=known_active)

    seen = {}

    def check(h):
        if h not in seen:
            params = cfg.params.scaled(h)
            active = [j for j in epsilon_active_set(g_upper, params.eps) if uncertain[j]]
            ok = rows_feasible(u_k, descent_rows(check_boxes, active, params, **kw), *box)
            seen[h] = ok, params, active
        return seen[h]

    # shrinking eps drops rows and shrinking the margins relaxes the rest, so
    # feasibility is monotone in the halving count and bisection finds the
    # first feasible count of the sequential halving schedule
    h_floor = cfg.params.halvings_to_floor()
    halvings = _first_true(lambda h: check(h)[0], h_floor, hint[0])
    if halvings > h_floor:
        raise _Infeasible(cfg.params.scaled(h_floor), h_floor)
    _, params, active = check(halvings)
    diag.eps_level = params.eps_level
    diag.halvings = halvings

    full = boxes
    if cfg.m_mode:
        m_bar = max_robust_m(u_k, estimates, cfg.sigma_grad, active, params, box, cfg.m_max, **kw)
        m = cfg.m_fraction * m_bar
        diag.m = m
        full = _scaled_boxes(estimates, cfg.sigma_grad, m)

    if cfg.policy == "partial-robustness" and not full.degenerate:
        P = select_robustness_level(u_k, full, active, params, box, cfg.p_step, hint=hint[1], **kw)
    else:
        P = 1.0
    levels = [p for p in cfg.p_levels if p <= P]
    for P in levels:
        shrunk = full.shrink(P)
        try:
            u_bar = solve_rows(target, u_k, descent_rows(shrunk, active, params, **kw), *box)
            break
        except Infeasible:
            if P == 0.0:
                raise _Infeasible(params, halvings)
    diag.P = float(P)
    diag.boxes = full
    return u_bar, params.with_P(P), _Grads(full, shrunk), diag


# ---------------------------------------------------------------------------
# campaign loop
# ---------------------------------------------------------------------------

IMPLEMENTATIONS = ("I", "II", "III", "IV")


@dataclass(frozen=True)
class CampaignConfig:
    """Simulation settings of one campaign.

    Parameters
    ----------
    implementation : str
        ``"I"`` exact gradients; ``"II"`` noisy gradients used as exact;
        ``"III"`` noisy gradients with boxes of half-width ``sigma * kappa``;
        ``"IV"`` noisy gradients with general-purpose boxes sized each
        iteration (unit derivative scale on range-scaled functions).
    sigma : float
        Gradient noise level.
    sigma_g : float
        Constraint measurement noise level (relative to the constraint ranges).
    slack_level : float
        Initial allowed violation as a fraction of the constraint ranges
        (zero keeps every constraint hard).
    concave_in : array (n_g, n_u), optional
        Declared concavity of the constraints.
    q_bound : array, optional
        Quadratic bound on the cost Hessian (defaults to the problem's).
    adaptive_q : bool
        Double the quadratic bound whenever the cost fails to decrease.
    policy, reuse_history, m_fraction :
        Passed to :class:`SupervisorConfig`.
    perturb_limit : int
        Refinements allowed per iteration under the perturb-and-refine policy.
    real_plant_mode : bool
        Keep true values out of the trace.
    floor_ratio : float
        Back-off floors relative to the ceilings.
    """

    implementation: str = "I"
    sigma: float = 0.0
    sigma_g: float = 0.0
    slack_level: float = 0.0
    concave_in: Optional[np.ndarray] = None
    q_bound: Optional[np.ndarray] = None
    adaptive_q: bool = False
    policy: str = "partial-robustness"
    reuse_history: bool = False
    m_fraction: float = 0.5
    perturb_limit: int = 10
    real_plant_mode: bool = False
    floor_ratio: float = 1e-6

    def __post_init__(self):
        if self.implementation not in IMPLEMENTATIONS:
            raise ValueError(f"unknown implementation {self.implementation!r}")
        if self.sigma < 0 or self.sigma_g < 0 or self.slack_level < 0:
            raise ValueError("noise and slack levels must be nonnegative")


def supervisor_config(problem: RtoProblem, cfg: CampaignConfig) -> SupervisorConfig:
    lip = LipschitzTable.symmetric(problem.lipschitz, cfg.concave_in)
    params = ProjectionParams.from_ranges(problem.g_range, problem.phi_range, cfg.floor_ratio)
    sigma_grad = None
    if cfg.implementation == "IV":
        # unit derivative scale on range-scaled functions
        sigma_grad = np.vstack([np.full(problem.n_u, problem.phi_range),
                                np.repeat(problem.g_range[:, None], problem.n_u, axis=1)])
    return SupervisorConfig(params=params, lipschitz=lip, m_mode=cfg.implementation == "IV",
                            m_fraction=cfg.m_fraction, sigma_grad=sigma_grad, policy=cfg.policy,
                            reuse_history=cfg.reuse_history)


def _gradient_boxes(problem, cfg: CampaignConfig, u, k, sigma, rng) -> GradientSet:
    grad_phi = problem.cost_grad_at(u, k)
    jac = problem.constraints_jac(u)
    noisy = cfg.implementation != "I" and sigma > 0
    if noisy and not problem.known_cost:
        est_phi = inject_gradient_noise(grad_phi, problem.kappa_cost, sigma, rng)
    else:
        est_phi = grad_phi
    if cfg.implementation == "III" and not problem.known_cost:
        cost = build_gradient_box(est_phi, problem.kappa_cost, sigma)
    else:
        cost = GradientBox.exact(est_phi)
    cons = []
    for j in range(problem.n_g):
        if problem.known_constraints[j] or not noisy:
            cons.append(GradientBox.exact(jac[j]))
            continue
        est = inject_gradient_noise(jac[j], problem.lipschitz[j], sigma, rng)
        if cfg.implementation == "III":
            cons.append(build_gradient_box(est, problem.lipschitz[j], sigma))
        else:
            cons.append(GradientBox.exact(est))
    return GradientSet(cost, tuple(cons))


def run_campaign(problem: RtoProblem, algorithm: AlgorithmSpec, cfg: CampaignConfig = None,
                 k_f: int = None, seed: int = 0, supervisor: SupervisorConfig = None) -> CampaignTrace:
    """Simulate ``k_f`` supervised iterations from ``problem.u0``.

    Every source of randomness draws from its own stream spawned from
    ``seed``, so a campaign is reproducible bit for bit.
    """
    cfg = CampaignConfig() if cfg is None else cfg
    k_f = problem.k_f if k_f is None else int(k_f)
    sup = supervisor_config(problem, cfg) if supervisor is None else supervisor
    if sup.reuse_history and problem.known_constraints.any():
        raise ValueError("history reuse is only supported with all constraints uncertain")
    if cfg.real_plant_mode and algorithm.kind == "ideal-target":
        raise ValueError("the ideal-target scheme needs the plant optimum, unavailable on a real plant")
    seeds = np.random.SeedSequence(seed).spawn(3)
    rng_grad, rng_meas, rng_algo = (np.random.default_rng(s) for s in seeds)

    noise = NoiseModel.gaussian(cfg.sigma_g, problem.g_range, sigma=cfg.sigma)
    slack = SlackState.from_level(cfg.slack_level, problem.g_range, soft=problem.uncertain)
    q_matrix = problem.cost_hessian_bound if cfg.q_bound is None else np.asarray(cfg.q_bound, dtype=float)
    qbound = QBoundState(q_matrix, adaptive=cfg.adaptive_q)
    history = History(problem.n_u, problem.n_g, capacity=k_f + 2)
    # the optimum in force at the end of the run, the reference for convergence checks
    trace = CampaignTrace(phi_star=problem.phi_star_at(k_f), u_star=problem.u_star_at(k_f))
    cost_log = []
    cap = np.zeros(problem.n_g)
    previous = None
    u = problem.u0.copy()

    for k in range(k_f + 1):
        phi_true = problem.cost_at(u, k)
        g_true = np.asarray(problem.constraints(u), dtype=float)
        g_meas = inject_constraint_noise(g_true, cfg.sigma_g, problem.g_range, rng_meas)
        g_meas = np.where(problem.known_constraints, g_true, g_meas)
        phi_meas = phi_true
        history.append(k, u, g_meas, phi_meas)
        g_upper = constraint_upper_bounds(history, noise, sup.lipschitz, cap)
        g_upper = np.where(problem.known_constraints, g_true, g_upper)
        history.g_upper[history.size - 1] = g_upper
        cost_log.append(phi_meas)

        rec = dict(k=k, u=u.copy(), phi_true=phi_true, g_true=g_true, phi_meas=phi_meas, g_meas=g_meas,
                   phi_star=problem.phi_star_at(k))
        if cfg.real_plant_mode:
            rec.update(phi_true=np.nan, g_true=np.full(problem.n_g, np.nan), phi_star=np.nan)
        if k == k_f:
            trace.records.append(TraceRecord(K=0.0, P=np.nan, eps_min=np.nan, variant="final", d=slack.d.copy(),
                                             status="final", **rec))
            break

        qbound = adapt_qbound(qbound, cost_log, noise.cost_noise_std)
        slack = slack_step(slack, g_upper)
        ref = fallback_reference(history, slack, g_upper) if slack.soft.any() else history.size - 1
        u_ref = history.u[ref].copy()
        state = IterateState(k=k, u=u_ref, history=history, g_upper=history.g_upper[ref].copy(),
                             slack=slack, qbound=qbound, previous=previous)
        sigma = cfg.sigma
        state.grad_boxes = _gradient_boxes(problem, cfg, u_ref, k, sigma, rng_grad)
        target = next_target(algorithm, state, problem, rng_algo)

        refinements = 0
        while True:
            try:
                u_next, diag = run_iteration(state, target, sup, problem)
                break
            except Converged as exc:
                u_next, diag = u_ref.copy(), exc.diagnostics
                break
            except PerturbationRequested as exc:
                if refinements >= cfg.perturb_limit:
                    u_next, diag = u_ref.copy(), exc.diagnostics
                    diag.status = "converged"
                    break
                refinements += 1
                sigma *= 0.5
                state.grad_boxes = _gradient_boxes(problem, cfg, u_ref, k, sigma, rng_grad)
        if refinements:
            diag.status = f"{diag.status}+refined{refinements}"

        boxes = diag.boxes if diag.boxes is not None else state.grad_boxes
        trace.records.append(TraceRecord(
            K=float(diag.K), P=float(diag.P), eps_min=float(diag.eps_level), variant=diag.variant,
            d=slack.d.copy(), binding=diag.binding, status=diag.status, ref_k=int(history.k[ref]),
            box_lo=np.concatenate([boxes.cost.lo] + [b.lo for b in boxes.constraints]),
            box_hi=np.concatenate([boxes.cost.hi] + [b.hi for b in boxes.constraints]), **rec))
        cap = slack.d.copy()
        previous = diag
        u = u_next
    return trace
