import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gbsde.errors import InputError, NumericError, ResourceError
from gbsde.extspace import LinearCoefficients, d_tilde, lambda_from_arrays
from gbsde.gcore import VolatilitySet
from gbsde.lattice import (PathFunctional, TimeGrid, backward, bmo_norm_estimate, build_extended_tree, build_tree,
                           check_tree_invariants, conditional_upper_expectation, constant_rule, coordinate,
                           expectation_values, girsanov_expectation, girsanov_values, sign_patterns,
                           stochastic_exponential, upper_expectation)

from oracles import binomial_expectation, recombining_key_count

THETA = VolatilitySet.interval(0.5)
THETA_2D = VolatilitySet(np.array([[[1.0, 0.0], [0.0, 0.6]], [[0.8, 0.2], [0.0, 1.0]]]))


def test_time_grid():
    grid = TimeGrid.from_dt(2.0, 0.25)
    assert grid.steps == 8
    np.testing.assert_allclose(grid.times, np.arange(9) * 0.25)
    with pytest.raises(InputError):
        TimeGrid.from_dt(1.0, 0.3)
    with pytest.raises(InputError):
        TimeGrid(0.0, 1.0, 0)
    with pytest.raises(InputError):
        TimeGrid(1.0, 1.0, 4)


def test_sign_patterns():
    np.testing.assert_array_equal(sign_patterns(2), [[-1, -1], [-1, 1], [1, -1], [1, 1]])


@pytest.mark.parametrize("E,d,N", [(2, 1, 5), (3, 1, 4), (2, 2, 3)])
def test_recombining_node_count(E, d, N):
    theta = VolatilitySet(np.array([0.5, 1.0, 1.5][:E])) if d == 1 else THETA_2D
    tree = build_tree(theta, TimeGrid(0.0, 1.0, N))
    assert tree.leaves.size == recombining_key_count(E, d, N)


def test_path_tree_size_and_links():
    tree = build_tree(THETA_2D, TimeGrid(0.0, 1.0, 3), recombine=False)
    assert tree.leaves.size == (2 * 4) ** 3
    B, Q = tree.leaf_paths()
    leaf = 37
    Bp, Qp = tree.path_states((3, leaf))
    np.testing.assert_array_equal(B[leaf], Bp)
    np.testing.assert_array_equal(Q[leaf], Qp)
    with pytest.raises(InputError):
        build_tree(THETA, TimeGrid(0.0, 1.0, 2)).path((2, 0))
    with pytest.raises(InputError):
        tree.check_node((5, 0))


@pytest.mark.parametrize("N", [1, 4, 9])
def test_convex_and_concave_payoffs_pick_extreme_sigma(N):
    tree = build_tree(THETA, TimeGrid(0.0, 1.5, N))
    convex = PathFunctional.terminal(lambda t, B, Q: np.abs(B[..., 0] - 0.1) ** 3)
    concave = PathFunctional.terminal(lambda t, B, Q: -np.cosh(B[..., 0]))
    assert upper_expectation(tree, convex) == pytest.approx(
        binomial_expectation(lambda x: abs(x - 0.1) ** 3, 1.0, 1.5, N), rel=1e-12)
    assert upper_expectation(tree, concave) == pytest.approx(
        binomial_expectation(lambda x: -math.cosh(x), 0.5, 1.5, N), rel=1e-12)


@pytest.mark.parametrize("N", [1, 3, 10])
def test_moments_exact(N):
    tree = build_tree(THETA, TimeGrid(0.0, 2.0, N))
    assert abs(upper_expectation(tree, coordinate(1))) < 1e-12
    assert upper_expectation(tree, coordinate(1, 2)) == pytest.approx(2.0, abs=1e-12)
    assert upper_expectation(tree, -coordinate(1, 2)) == pytest.approx(-0.5, abs=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 4), st.floats(-2, 2), st.floats(-2, 2), st.floats(0.1, 3))
def test_recombining_matches_path_tree(N, a, b, c):
    payoff = PathFunctional.terminal(lambda t, B, Q: np.sin(a * B[..., 0] + b * Q[..., 0, 0]) + c * B[..., 0] ** 2)
    grid = TimeGrid(0.0, 1.0, N)
    v1 = upper_expectation(build_tree(THETA, grid), payoff)
    v2 = upper_expectation(build_tree(THETA, grid, recombine=False), payoff)
    assert v1 == pytest.approx(v2, abs=1e-12)


def test_upper_expectation_is_sublinear():
    tree = build_tree(THETA_2D, TimeGrid(0.0, 1.0, 4))
    X = PathFunctional.from_expression("sin(B1) * B2", 2)
    Y = PathFunctional.from_expression("cos(B1 + B2) - Q12", 2)
    XY = PathFunctional.from_expression("sin(B1) * B2 + cos(B1 + B2) - Q12", 2)
    assert upper_expectation(tree, XY) <= upper_expectation(tree, X) + upper_expectation(tree, Y) + 1e-12
    assert -upper_expectation(tree, -X) <= upper_expectation(tree, X) + 1e-12


def test_conditional_expectation_at_root():
    tree = build_tree(THETA, TimeGrid(0.0, 1.0, 4))
    payoff = coordinate(1, 2)
    assert conditional_upper_expectation(tree, (0, 0), payoff) == upper_expectation(tree, payoff)
    vals = expectation_values(tree, payoff).values
    # conditional second moment: B_t^2 + sigma_bar^2 (T - t)
    np.testing.assert_allclose(vals[2], tree.levels[2].B[:, 0] ** 2 + 0.5, atol=1e-12)


def test_node_budget_and_env(monkeypatch):
    with pytest.raises(ResourceError):
        build_tree(THETA, TimeGrid(0.0, 1.0, 10), node_budget=50)
    monkeypatch.setenv("GBSDE_NODE_BUDGET", "50")
    with pytest.raises(ResourceError):
        build_tree(THETA, TimeGrid(0.0, 1.0, 10))
    monkeypatch.setenv("GBSDE_NODE_BUDGET", "lots")
    with pytest.raises(InputError):
        build_tree(THETA, TimeGrid(0.0, 1.0, 2))


def test_tree_invariants_with_and_without_drift():
    grid = TimeGrid(0.0, 1.0, 4)
    assert check_tree_invariants(build_tree(THETA_2D, grid))
    drifted = build_tree(THETA_2D, grid, drift=np.array([[0.1, 0.2], [-0.3, 0.0]]))
    assert check_tree_invariants(drifted)
    np.testing.assert_allclose(drifted.increments(0)[0].mean(axis=2)[0], [[0.025, 0.05], [-0.075, 0.0]])
    with pytest.raises(InputError):
        build_tree(THETA, grid, drift=lambda t, B, Q: B)


def test_payoff_errors():
    tree = build_tree(THETA, TimeGrid(0.0, 1.0, 2))
    with pytest.raises(NumericError):
        PathFunctional.from_expression("log(B1)", 1).evaluate(tree)
    path_payoff = PathFunctional.path(lambda t, B, Q: B[:, :, 0].max(axis=1))
    with pytest.raises(InputError):
        path_payoff.evaluate(tree)
    with pytest.raises(InputError):
        PathFunctional(lambda *a: 0, "sometimes")
    with pytest.raises(InputError):
        backward(tree, np.zeros(3))


def test_path_functional_running_max():
    tree = build_tree(THETA, TimeGrid(0.0, 1.0, 2), recombine=False)
    payoff = PathFunctional.path(lambda t, B, Q: B[:, :, 0].max(axis=1))
    # sigma = 1 is optimal on both steps; the four paths give maxima 0, 0, s, 2s
    s = math.sqrt(0.5)
    assert upper_expectation(tree, payoff) == pytest.approx(3 * s / 4, rel=1e-12)


def test_stochastic_exponential_constant():
    times = np.linspace(0, 1, 4)
    B = np.array([[0.0], [0.3], [0.1], [0.5]])
    Q = np.array([[[0.0]], [[0.2]], [[0.4]], [[0.7]]])
    val = stochastic_exponential(times, B, Q, constant_rule([2.0]))
    assert val == pytest.approx(math.exp(2.0 * 0.5 - 0.5 * 4.0 * 0.7))


@pytest.mark.parametrize("lam", [0.3, -1.2])
def test_weight_mode_total_mass(lam):
    theta = VolatilitySet(np.array([0.7]))
    N = 6
    tree = build_tree(theta, TimeGrid(0.0, 1.0, N))
    a = lam * 0.7 * math.sqrt(1 / N)
    expect = (math.cosh(a) * math.exp(-0.5 * a * a)) ** N
    assert girsanov_expectation(tree, PathFunctional.constant(1.0), [lam]) == pytest.approx(expect, rel=1e-12)


def test_weight_and_shift_agree_as_dt_shrinks():
    coeffs = LinearCoefficients.create(1, b=[0.4], dcoef=[[[0.3]]])
    payoff = PathFunctional.from_expression("sin(B1)", 1)
    gaps = []
    for N in (8, 16, 32):
        tree = build_tree(THETA, TimeGrid(0.0, 1.0, N))
        w = girsanov_expectation(tree, payoff, coeffs, "weight")
        s = girsanov_expectation(tree, payoff, coeffs, "shift")
        gaps.append(abs(w - s))
    assert gaps[2] < gaps[1] < gaps[0] < 0.05


def test_extended_lattice_matches_marginalized_weights():
    coeffs = LinearCoefficients.create(1, b=[0.4], dcoef=[[[0.3]]])
    lam = lambda t, B, Q: lambda_from_arrays(coeffs.b(t, B[..., :1], Q[..., :1, :1]),
                                             coeffs.dcoef(t, B[..., :1], Q[..., :1, :1]))
    payoff = PathFunctional.terminal(lambda t, B, Q: np.sin(B[..., 0]))
    grid = TimeGrid(0.0, 1.0, 5)
    ext = build_extended_tree(THETA, grid)
    assert ext.dim == d_tilde(1)
    base = build_tree(THETA, grid)
    assert girsanov_expectation(ext, payoff, lam) == pytest.approx(
        girsanov_expectation(base, payoff, lam), abs=1e-12)


def test_girsanov_mode_errors():
    tree = build_tree(THETA, TimeGrid(0.0, 1.0, 2))
    payoff = PathFunctional.constant(1.0)
    with pytest.raises(InputError):
        girsanov_values(tree, payoff, [0.1], mode="shift")
    with pytest.raises(InputError):
        girsanov_values(tree, payoff, [0.1], mode="tilt")
    with pytest.raises(InputError):
        girsanov_values(tree, payoff, [0.1, 0.2, 0.3])


def test_shift_with_state_dependent_drift_uses_path_tree():
    coeffs = LinearCoefficients.create(1, b=["0.5*cos(B1)"])
    tree = build_tree(THETA, TimeGrid(0.0, 1.0, 3))
    used, _ = girsanov_values(tree, PathFunctional.constant(1.0), coeffs, "shift")
    assert not used.recombining
    assert check_tree_invariants(used)


def test_bmo_constant_lambda():
    tree = build_tree(THETA_2D, TimeGrid(0.0, 2.0, 3))
    assert bmo_norm_estimate(tree, constant_rule([0.3, 0.4])) == pytest.approx(0.25 * 2.0)
    per_level = [np.full((lv.size, 1), 2.0) for lv in tree.levels[:-1]]
    assert bmo_norm_estimate(tree, per_level) == pytest.approx(4.0 * 2.0)


def test_stats_are_self_describing():
    stats = build_tree(THETA, TimeGrid(0.0, 1.0, 3)).stats()
    assert stats["steps"] == 3
    assert stats["node_count"] == sum(stats["nodes_per_level"])
    assert stats["recombining"]
