import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from scfo.algorithms import ALGORITHMS, AlgorithmSpec, next_target
from scfo.bench import benchmark_problem
from scfo.problem import History, IterateState
from scfo.uncertainty import GradientBox, GradientSet


def state_at(problem, u, grad, k=0, history=None):
    grads = GradientSet(GradientBox.exact(grad), ())
    h = history
    if h is None:
        h = History(problem.n_u, problem.n_g, capacity=1)
        h.append(k, u, problem.constraints(u), problem.cost(u))
    return IterateState(k=k, u=np.asarray(u, float), history=h, grad_boxes=grads)


def test_short_names():
    assert AlgorithmSpec("GD").kind == "gradient-descent"
    with pytest.raises(ValueError):
        AlgorithmSpec("newton")


def test_ideal_target_is_the_optimum():
    p = benchmark_problem("B")
    for u in ([0.0, 0.4], [0.2, 0.1]):
        target = next_target(AlgorithmSpec("IT"), state_at(p, u, [0.0, 0.0]), p)
        assert np.allclose(target, p.u_star)


def test_ideal_target_follows_a_cost_change():
    p = benchmark_problem("B", cost_change=True)
    late = state_at(p, [0.0, 0.4], [0.0, 0.0], k=p.cost_change.k)
    assert np.allclose(next_target(AlgorithmSpec("IT"), late, p), p.cost_change.u_star)


def test_gradient_step_is_clipped():
    p = benchmark_problem("B")
    target = next_target(AlgorithmSpec("GD"), state_at(p, [0.0, 0.4], [-1.0, 0.0]), p)
    assert np.allclose(target, [0.5, 0.4])


def test_modifier_adaptation_matches_plant_gradient():
    # the modified model's minimizer is a Newton-like step with the model curvature
    p = benchmark_problem("B")
    spec = AlgorithmSpec("MA")
    u, g = np.array([0.1, 0.3]), np.array([0.2, -0.1])
    target = next_target(spec, state_at(p, u, g), p)
    assert np.allclose(target, p.clip(u - g / (2 * np.array(spec.model_curvature))))


def test_two_step_recovers_a_separable_quadratic():
    p = benchmark_problem("B")
    spec = AlgorithmSpec("TS")
    c, center = np.array(spec.model_curvature), np.array([0.1, 0.5])
    h = History(2, p.n_g, capacity=8)
    pts = [[0.0, 0.4], [0.2, 0.4], [0.2, 0.2], [0.0, 0.4], [0.3, 0.1]]
    for k, u in enumerate(pts):
        h.append(k, u, p.constraints(u), float(np.sum(c * (np.array(u) - center) ** 2)) + 0.7)
    target = next_target(spec, state_at(p, pts[-1], [0.0, 0.0], k=4, history=h), p)
    assert np.allclose(target, center)


def test_random_step_is_reproducible():
    p = benchmark_problem("B")
    st0 = state_at(p, [0.0, 0.4], [0.0, 0.0])
    a = [next_target(AlgorithmSpec("RS"), st0, p, np.random.default_rng(3)) for _ in range(2)]
    assert np.array_equal(a[0], a[1])
    with pytest.raises(ValueError):
        next_target(AlgorithmSpec("RS"), st0, p)


@settings(max_examples=50, deadline=None)
@given(st.sampled_from(ALGORITHMS), st.floats(-0.5, 0.5), st.floats(0, 0.8),
       st.floats(-50, 50), st.floats(-50, 50), st.integers(0, 100))
def test_targets_stay_in_the_box(kind, u1, u2, g1, g2, seed):
    p = benchmark_problem("A")
    target = next_target(AlgorithmSpec(kind), state_at(p, [u1, u2], [g1, g2]), p, np.random.default_rng(seed))
    assert p.in_box(target)
