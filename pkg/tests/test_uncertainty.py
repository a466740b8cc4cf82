import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from oracles import box_vertices
from scfo.problem import History
from scfo.uncertainty import GradientBox, LipschitzTable, NoiseModel, QBoundState, adapt_qbound, \
    build_gradient_box, constraint_upper_bound, constraint_upper_bounds, epsilon_active_set, \
    feasible_polytope_contains, lipschitz_growth, quad_form_upper, shrink_box, worst_case_directional

small = st.floats(-5, 5)


@st.composite
def boxes(draw, n=None):
    n = draw(st.integers(1, 4)) if n is None else n
    est = draw(arrays(float, n, elements=small))
    below = draw(arrays(float, n, elements=st.floats(0, 3)))
    above = draw(arrays(float, n, elements=st.floats(0, 3)))
    return GradientBox(est - below, est + above, est)


def test_zero_multiplier_gives_degenerate_box():
    box = build_gradient_box([1.0, -2.0], [0.3, 0.4], 0.0)
    assert np.array_equal(box.lo, box.hi) and np.array_equal(box.lo, [1.0, -2.0])


def test_box_arithmetic():
    box = build_gradient_box([1.0, -1.0], [1.0, 1.0], 0.5)
    assert np.allclose(box.lo, [0.5, -1.5]) and np.allclose(box.hi, [1.5, -0.5])


def test_box_from_lipschitz_row():
    kappa, sigma = np.array([2.2, 0.35]), 0.3
    box = build_gradient_box([0.1, 0.2], kappa, sigma)
    assert np.allclose(box.hi - box.estimate, sigma * kappa)
    assert np.allclose(box.estimate - box.lo, sigma * kappa)


@pytest.mark.parametrize("args", [([1.0], [-1.0], 1.0), ([1.0], [1.0], -1.0), ([np.inf], [1.0], 1.0)])
def test_box_rejects_bad_input(args):
    with pytest.raises(ValueError):
        build_gradient_box(*args)


def test_box_rejects_inverted_bounds():
    with pytest.raises(ValueError):
        GradientBox([1.0], [0.0], [0.5])


def test_shrink_examples():
    box = GradientBox([-2.0], [4.0], [0.0])
    assert shrink_box(box, 1.0) is box
    zero = shrink_box(box, 0.0)
    assert zero.lo[0] == zero.hi[0] == 0.0
    half = shrink_box(box, 0.5)
    assert half.lo[0] == -1.0 and half.hi[0] == 2.0


@given(boxes(), st.floats(0, 1), st.floats(0, 1))
def test_shrunk_boxes_nest(box, p, q):
    small_, big = shrink_box(box, min(p, q)), shrink_box(box, max(p, q))
    assert np.all(small_.lo >= big.lo - 1e-12) and np.all(small_.hi <= big.hi + 1e-12)
    assert np.all(big.lo >= box.lo - 1e-12) and np.all(big.hi <= box.hi + 1e-12)


def test_worst_case_examples():
    assert worst_case_directional(GradientBox.exact([1.0, 2.0]), [3.0, -1.0]) == 1.0
    assert worst_case_directional(GradientBox([-1.0, -1.0], [1.0, 1.0], [0.0, 0.0]), [1.0, -2.0]) == 3.0


@given(boxes(n=3), arrays(float, 3, elements=small))
def test_worst_case_is_the_vertex_maximum(box, d):
    # sound (no vertex exceeds it) and tight (some vertex attains it)
    vals = box_vertices(box.lo, box.hi) @ d
    wc = worst_case_directional(box, d)
    assert vals.max() <= wc + 1e-9
    assert vals.max() >= wc - 1e-9


@given(boxes(n=3), arrays(float, 3, elements=small), st.integers(0, 2 ** 32 - 1))
def test_worst_case_bounds_interior_gradients(box, d, seed):
    g = np.random.default_rng(seed).uniform(box.lo, box.hi)
    assert g @ d <= worst_case_directional(box, d) + 1e-9


def _history(points, g_meas, g_upper=None):
    h = History(len(points[0]), len(g_meas[0]), capacity=len(points))
    for k, (u, g) in enumerate(zip(points, g_meas)):
        h.append(k, u, g, 0.0, None if g_upper is None else g_upper[k])
    return h


def test_upper_bound_single_measurement():
    lip = LipschitzTable.symmetric([[1.0, 1.0]])
    noise = NoiseModel(w_lo=[-0.3])
    assert constraint_upper_bound(0, _history([[0, 0]], [[-0.5]]), noise, lip) == pytest.approx(-0.2)


def test_upper_bound_from_repeats():
    lip = LipschitzTable.symmetric([[1.0, 1.0]])
    noise = NoiseModel(w_lo=[-0.3])
    h = _history([[0, 0]] * 4, [[-0.4], [-0.6], [-0.5], [-0.5]])
    assert noise.mean_lower(4)[0] == pytest.approx(-0.15)
    # the latest reading alone gives -0.2; the mean of four gives -0.35
    assert constraint_upper_bound(0, h, noise, lip) == pytest.approx(-0.35)


def test_upper_bound_from_neighbor():
    lip = LipschitzTable.symmetric([[1.0, 1.0]])
    noise = NoiseModel(w_lo=[0.0])
    h = _history([[0.0, 0.0], [0.2, 0.1]], [[-1.0], [0.0]], g_upper=[[-1.0], [np.nan]])
    assert constraint_upper_bound(0, h, noise, lip) == pytest.approx(-0.7)


def test_upper_bound_never_exceeds_cap():
    lip = LipschitzTable.symmetric([[1.0]])
    h = _history([[0.0]], [[0.5]])
    assert constraint_upper_bounds(h, NoiseModel(w_lo=[0.0]), lip, cap=[0.0])[0] == 0.0


def test_gaussian_noise_bound_scales_with_root_n():
    noise = NoiseModel.gaussian(0.02, [1.0, 2.0])
    assert np.allclose(noise.mean_lower(1), [-0.06, -0.12])
    assert np.allclose(noise.mean_lower(4), 0.5 * noise.mean_lower(1))


def test_epsilon_active_set():
    assert list(epsilon_active_set([-0.5], [1.0])) == [0]
    assert list(epsilon_active_set([-0.5], [0.1])) == []
    assert list(epsilon_active_set([0.0], [1e-9])) == [0]


def test_growth_examples():
    lip = LipschitzTable.symmetric([[1.0, 1.0]])
    assert lipschitz_growth(lip, 0, [0.1, -0.1]) == pytest.approx(0.2)
    one_sided = LipschitzTable([[0.0, -1.0]], [[1.0, 1.0]])
    assert lipschitz_growth(one_sided, 0, [-0.3, 0.0]) == 0.0


def test_concave_growth_can_be_negative():
    lip = LipschitzTable.symmetric([[1.0, 1.0]], concave_in=[[True, True]])
    box = GradientBox([-2.0, -2.0], [-1.0, -0.5], [-1.5, -1.0])
    assert lipschitz_growth(lip, 0, [0.1, 0.2], box) < 0
    # away from the estimation point only the Lipschitz term is valid
    assert lipschitz_growth(lip, 0, [0.1, 0.2], box, local=False) > 0
    with pytest.raises(ValueError):
        lipschitz_growth(lip, 0, [0.1, 0.2])


@given(arrays(float, 2, elements=small), st.floats(0, 3), st.floats(0, 3))
def test_growth_bounds_linear_constraints(d, k1, k2):
    # any linear function with slopes inside the table grows no faster than the bound
    lip = LipschitzTable.symmetric([[k1, k2]])
    for v in box_vertices([-k1, -k2], [k1, k2]):
        assert v @ d <= lipschitz_growth(lip, 0, d) + 1e-9


def test_polytope_membership():
    lip = LipschitzTable.symmetric([[1.0, 1.0]])
    assert feasible_polytope_contains([0, 0], [-0.5], lip, [0, 0])
    assert not feasible_polytope_contains([0, 0], [-1.0], lip, [0.6, 0.6])
    assert feasible_polytope_contains([0, 0], [0.0], lip, [0, 0])
    assert not feasible_polytope_contains([0, 0], [0.0], lip, [1e-9, 0])


def test_quadratic_bounds():
    assert quad_form_upper(QBoundState(2 * np.eye(2)), [1.0, 0.0]) == 2.0
    q = QBoundState(np.eye(2), M_lo=np.diag([2.0, 2.0]), M_hi=np.diag([10.0, 10.0]))
    d = np.array([0.3, -0.7])
    assert quad_form_upper(q, d) == pytest.approx(10.0 * d @ d)


def test_qbound_adaptation():
    q = QBoundState(np.eye(2), adaptive=True)
    assert np.array_equal(adapt_qbound(q, [3.0, 2.0, 1.0]).Q, np.eye(2))
    once = adapt_qbound(q, [1.0, 2.0])
    assert np.array_equal(once.Q, 2 * np.eye(2)) and once.n == 1
    costs = [1.0, 2.0, 3.0, 4.0]
    for k in range(1, 4):
        q = adapt_qbound(q, costs[: k + 1])
    assert np.array_equal(q.Q, 8 * np.eye(2))
    # noisy measurements need a rise beyond three standard deviations
    assert np.array_equal(adapt_qbound(QBoundState(np.eye(1), adaptive=True), [1.0, 1.2], 0.1).Q, np.eye(1))
