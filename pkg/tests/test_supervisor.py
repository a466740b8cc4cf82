import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from scfo.algorithms import AlgorithmSpec
from scfo.bench import benchmark_problem, trace_rows
from scfo.problem import History, IterateState, PolyOracle, RtoProblem
from scfo.projection import ProjectionParams, descent_rows, rows_feasible
from scfo.supervisor import CampaignConfig, Converged, PerturbationRequested, _first_true, max_robust_m, \
    robustness_levels, run_campaign, run_iteration, select_robustness_level, supervisor_config
from scfo.uncertainty import GradientBox, GradientSet

WIDE = (np.array([-10.0, -10.0]), np.array([10.0, 10.0]))


def params(n_g, delta_phi=1e-3):
    v = np.ones(n_g)
    return ProjectionParams(v, 1e-3 * v, delta_phi, v, v, 1.0, 1e-6 * v, 1e-6 * v, min(1e-12, delta_phi / 2))


def exact_state(problem, u):
    h = History(problem.n_u, problem.n_g, capacity=1)
    g = problem.constraints(u)
    h.append(0, u, g, problem.cost(u), g)
    grads = GradientSet(GradientBox.exact(problem.cost_grad(u)),
                        tuple(GradientBox.exact(r) for r in problem.constraints_jac(u)))
    return IterateState(k=0, u=np.asarray(u, float), history=h, g_upper=g, grad_boxes=grads)


def test_robustness_grid():
    levels = robustness_levels(0.05)
    assert len(levels) == 21 and levels[0] == 1.0 and levels[-1] == 0.0
    assert np.allclose(np.diff(levels), -0.05)


@given(st.integers(0, 40), st.integers(0, 45), st.one_of(st.none(), st.integers(-2, 45)))
def test_search_matches_linear_scan(n, switch, hint):
    calls = []

    def test(i):
        calls.append(i)
        return i >= switch

    expected = next((i for i in range(n + 1) if i >= switch), n + 1)
    assert _first_true(test, n, hint) == expected
    assert all(0 <= i <= n for i in calls)


def test_search_hint_costs_two_probes():
    calls = []
    _first_true(lambda i: calls.append(i) or i >= 7, 20, hint=7)
    assert len(calls) == 2


def _random_set(rng):
    est = rng.normal(size=(3, 2))
    half = rng.uniform(0, 1.5, (3, 2))
    boxes = [GradientBox(e - h, e + h, e) for e, h in zip(est, half)]
    return GradientSet(boxes[0], tuple(boxes[1:]))


def test_selected_level_is_the_first_feasible_one():
    rng = np.random.default_rng(5)
    box = (np.array([-1.0, -1.0]), np.array([1.0, 1.0]))
    levels = robustness_levels(0.05)
    prm = params(2)
    for _ in range(100):
        grads = _random_set(rng)
        feas = [rows_feasible(np.zeros(2), descent_rows(grads.shrink(P), [0, 1], prm), *box) for P in levels]
        # shrinking boxes never loses feasibility
        assert all(b or not a for a, b in zip(feas, feas[1:]))
        expected = next((P for P, ok in zip(levels, feas) if ok), 0.0)
        for hint in (None, 0, 10, 20):
            assert select_robustness_level(np.zeros(2), grads, [0, 1], prm, box, hint=hint) == expected


def test_max_multiplier_without_scales_is_the_cap():
    grads = GradientSet(GradientBox.exact([-1.0, 0.0]), ())
    assert max_robust_m(np.zeros(2), grads, np.zeros((1, 2)), [], params(0), WIDE, m_max=50.0) == 50.0


def test_max_multiplier_where_zero_enters_the_cost_box():
    grads = GradientSet(GradientBox.exact([-1.0, 0.0]), ())
    m = max_robust_m(np.zeros(2), grads, np.ones((1, 2)), [], params(0, delta_phi=1e-9), WIDE)
    assert m == pytest.approx(1.0, abs=1e-3)


def _bowl():
    cost = PolyOracle([[(1.0, (2, 0)), (-2.0, (1, 0)), (1.0, (0, 2)), (-2.0, (0, 1)), (2.0, (0, 0))]], 2, scalar=True)
    cons = PolyOracle([[(1.0, (1, 0)), (-1.5, (0, 0))]], 2)
    return RtoProblem(2, 1, cost, cost.grad, cons, cons.grad, [-1.0, -1.0], [2.0, 2.0], [0.0, 0.0],
                      lipschitz=np.array([[1.0, 0.1]]), kappa_cost=np.array([2.0, 2.0]), g_range=[1.0],
                      phi_range=1.0, u_star=np.array([1.0, 1.0]), phi_star=0.0)


def test_happy_path_keeps_full_robustness():
    p = _bowl()
    cfg = supervisor_config(p, CampaignConfig())
    u_next, diag = run_iteration(exact_state(p, p.u0), p.u_star, cfg, p)
    assert diag.P == 1.0 and diag.eps_level == 1.0 and diag.halvings == 0
    assert diag.K == 1.0 and np.allclose(u_next, [1.0, 1.0])


def test_crowded_start_backs_off():
    p = benchmark_problem("B")
    cfg = supervisor_config(p, CampaignConfig())
    u_next, diag = run_iteration(exact_state(p, p.u0), p.u_star, cfg, p)
    assert diag.halvings > 0 and diag.eps_level < 1.0
    assert 0 < diag.K <= 1 and np.all(p.constraints(u_next) <= 0)


def _stationary_state(p):
    state = exact_state(p, p.u0)
    state.grad_boxes = GradientSet(GradientBox.exact(np.zeros(2)), state.grad_boxes.constraints)
    return state


def test_stationary_estimate_converges():
    p = benchmark_problem("B")
    cfg = supervisor_config(p, CampaignConfig())
    with pytest.raises(Converged) as exc:
        run_iteration(_stationary_state(p), p.u_star, cfg, p)
    assert exc.value.diagnostics.status == "converged"
    assert exc.value.diagnostics.halvings == cfg.params.halvings_to_floor()


def test_perturb_policy_requests_refinement():
    p = benchmark_problem("B")
    cfg = supervisor_config(p, CampaignConfig(policy="perturb-and-refine"))
    with pytest.raises(PerturbationRequested):
        run_iteration(_stationary_state(p), p.u_star, cfg, p)


def test_target_outside_box_is_rejected():
    p = benchmark_problem("B")
    with pytest.raises(ValueError):
        run_iteration(exact_state(p, p.u0), [5.0, 5.0], supervisor_config(p, CampaignConfig()), p)


def test_zero_iterations_records_the_start_only():
    p = benchmark_problem("B")
    trace = run_campaign(p, AlgorithmSpec("ideal-target"), k_f=0)
    assert len(trace) == 1 and np.array_equal(trace.records[0].u, p.u0)


def test_nominal_problem_b_descends_safely():
    p = benchmark_problem("B")
    trace = run_campaign(p, AlgorithmSpec("ideal-target"))
    phi = trace.array("phi_true")
    assert np.all(np.diff(phi) <= 1e-12)
    assert np.all(trace.array("g_true") <= 0)
    assert len(trace) == p.k_f + 1


@pytest.mark.parametrize("impl", ["II", "III", "IV"])
def test_same_seed_same_trace(impl):
    p = benchmark_problem("B")
    cfg = CampaignConfig(implementation=impl, sigma=0.3, sigma_g=0.02)
    a, b = (trace_rows(run_campaign(p, AlgorithmSpec("random-step"), cfg, k_f=40, seed=11)) for _ in range(2))
    assert a == b


def test_history_reuse_needs_uncertain_constraints():
    p = benchmark_problem("B", known=("g1",))
    with pytest.raises(ValueError):
        run_campaign(p, AlgorithmSpec("ideal-target"), CampaignConfig(reuse_history=True), k_f=2)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10 ** 6), st.sampled_from(["I", "II", "III", "IV"]))
def test_noise_free_constraint_values_never_violated(seed, impl):
    p = benchmark_problem("B")
    sigma = 0.0 if impl == "I" else 0.3
    trace = run_campaign(p, AlgorithmSpec("random-step"), CampaignConfig(implementation=impl, sigma=sigma),
                         k_f=30, seed=seed)
    assert np.max(trace.array("g_true") / p.g_range) <= 1e-9
