import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gbsde.bsde import (LinearBsdeSpec, calibrate_bound_constant, check_dissipative_linear, check_generator_order,
                        compare_infinite, compare_solutions, fit_decay_rate, lemma_ey_bound, minimal_horizon,
                        solve_infinite_horizon, solve_linear_direct, solve_linear_explicit, solve_quadratic_fh,
                        truncation_gap, uniform_bound, validate_generator)
from gbsde.errors import ConfigError, InputError, NumericError, PreconditionError
from gbsde.extspace import LinearCoefficients
from gbsde.gcore import GeneratorSpec, SamplePlan, VolatilitySet
from gbsde.lattice import PathFunctional, TimeGrid, build_extended_tree, build_tree, coordinate

from oracles import explicit_euler_ode

THETA = VolatilitySet.interval(0.5)
THETA_2D = VolatilitySet(np.array([[[1.0, 0.0], [0.0, 0.6]], [[0.8, 0.2], [0.0, 1.0]]]))
ZERO = PathFunctional.constant(0.0)
expr = PathFunctional.from_expression


def gen(f, g=None, dim=1, **kw):
    return GeneratorSpec.from_expressions(dim, f, g, **kw)


@pytest.mark.parametrize("N", [4, 16])
def test_ode_matches_discrete_scheme(N):
    tree = build_tree(THETA, TimeGrid(0.0, 2.0, N))
    sol = solve_quadratic_fh(tree, gen("-y + 1"), ZERO)
    assert sol.root_Y == pytest.approx(explicit_euler_ode(0.0, lambda y: 1 - y, 2.0, N), abs=1e-13)
    np.testing.assert_allclose(sol.root_Z, 0.0)


def test_zero_generator_is_upper_expectation():
    tree = build_tree(THETA_2D, TimeGrid(0.0, 1.0, 4))
    sol = solve_quadratic_fh(tree, gen("0", dim=2), coordinate(1, 2))
    assert sol.root_Y == pytest.approx(1.0, abs=1e-12)


def test_linear_terminal_gives_unit_z():
    tree = build_tree(THETA, TimeGrid(0.0, 1.0, 5))
    sol = solve_quadratic_fh(tree, gen("0"), coordinate(1))
    for k in range(tree.steps):
        np.testing.assert_allclose(sol.Z[k], 1.0, atol=1e-12)
        np.testing.assert_allclose(sol.Y[k], tree.levels[k].B[:, 0], atol=1e-12)


def test_g_term_charges_quadratic_variation():
    # g = 1 on the diagonal: Y_0 = max_e sigma_e^2 T
    tree = build_tree(THETA, TimeGrid(0.0, 1.5, 6))
    assert solve_quadratic_fh(tree, gen("0", "1"), ZERO).root_Y == pytest.approx(1.5)
    assert solve_quadratic_fh(tree, gen("0", "-1"), ZERO).root_Y == pytest.approx(-0.25 * 1.5)


@pytest.mark.parametrize("dim", [1, 2])
def test_dynamics_residual(dim):
    theta = THETA if dim == 1 else THETA_2D
    tree = build_tree(theta, TimeGrid(0.0, 1.0, 5))
    g = gen("-y + 0.5*znorm2", "0.1*sin(y)", dim=dim)
    sol = solve_quadratic_fh(tree, g, expr("tanh(B1)" if dim == 1 else "sin(B1 - B2)", dim))
    assert sol.dynamics_residual() < 1e-12
    if dim == 1:
        assert max(float(np.abs(o).max()) for o in sol.orth) < 1e-12


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 4), st.floats(-1, 1), st.floats(0.0, 1.0))
def test_path_tree_matches_recombining(N, a, q):
    g = gen(f"-y + {q}*znorm2 + {a}*sin(B1)")
    grid = TimeGrid(0.0, 1.0, N)
    s1 = solve_quadratic_fh(build_tree(THETA, grid), g, expr("cos(B1)", 1))
    s2 = solve_quadratic_fh(build_tree(THETA, grid, recombine=False), g, expr("cos(B1)", 1))
    assert s1.root_Y == pytest.approx(s2.root_Y, abs=1e-12)
    assert s1.K_T_min() == pytest.approx(min(k.min() for k in s2.path_K()), abs=1e-12)


def test_k_properties_on_path_tree():
    tree = build_tree(THETA, TimeGrid(0.0, 1.0, 4), recombine=False)
    sol = solve_quadratic_fh(tree, gen("-y + 0.5*znorm2"), expr("tanh(B1)", 1))
    rep = sol.check_K()
    assert rep
    assert rep.metrics["max_K"] <= 1e-10
    assert sol.expected_K_T() == pytest.approx(0.0, abs=1e-12)
    assert sol.K_T_min() < 0
    with pytest.raises(InputError):
        solve_quadratic_fh(build_tree(THETA, TimeGrid(0.0, 1.0, 2)), gen("0"), ZERO).path_K()


def test_solver_errors():
    tree = build_tree(THETA, TimeGrid(0.0, 1.0, 3))
    with pytest.raises(NumericError):
        solve_quadratic_fh(tree, gen("exp(1000*y)"), PathFunctional.constant(1.0))
    with pytest.raises(ConfigError):
        solve_quadratic_fh(tree, gen("0", dim=2), ZERO)
    with pytest.raises(PreconditionError):
        solve_quadratic_fh(tree, gen("-5*y", Ly=1.0), ZERO, validate=True)
    drifted = build_tree(THETA, TimeGrid(0.0, 1.0, 3), drift=[[0.1], [0.1]])
    with pytest.raises(InputError):
        solve_quadratic_fh(drifted, gen("0"), ZERO)


def test_validate_generator_passes():
    assert validate_generator(gen("-y + 0.5*znorm2", M0=0.0, Lz=0.5), THETA)


def linear_spec(N=8, T=1.0, theta=THETA, xi="sin(B1)", mu=None, **kw):
    dim = theta.dim
    return LinearBsdeSpec(LinearCoefficients.create(dim, **kw), expr(xi, dim), TimeGrid(0.0, T, N), theta, mu)


def test_linear_closed_form():
    mu, m, T = 1.0, 1.0, 2.0
    spec = linear_spec(N=64, T=T, xi="0", a=-mu, m=m)
    exact = m * (1 - math.exp(-mu * T)) / mu
    assert solve_linear_direct(spec).root_Y == pytest.approx(exact, abs=0.05)
    assert solve_linear_explicit(spec).root_Y == pytest.approx(exact, abs=0.05)


def test_explicit_ratio_matches_literal_paths():
    spec = linear_spec(N=4, a="-0.5 + 0.1*cos(B1)", b=["0.3*sin(B1)"], c=[[0.2]], dcoef=[[[0.1]]],
                       m="0.2*B1", n=[["0.1*cos(B1)"]])
    ratio = solve_linear_explicit(spec, literal=False, tree=spec.build_tree(recombine=False))
    literal = solve_linear_explicit(spec, literal=True)
    for a, b in zip(ratio.Y, literal.Y):
        np.testing.assert_allclose(a, b, atol=1e-12)
    with pytest.raises(InputError):
        solve_linear_explicit(spec, literal=True, tree=spec.build_tree())


def test_explicit_on_extended_lattice_matches_weights():
    spec = linear_spec(N=5, a=-0.5, b=[0.3], dcoef=[[[0.2]]], m=0.1)
    ext = build_extended_tree(spec.theta, spec.grid)
    on_ext = solve_linear_explicit(spec, "weight", tree=ext).root_Y
    assert on_ext == pytest.approx(solve_linear_explicit(spec, "weight").root_Y, abs=1e-12)
    with pytest.raises(InputError):
        solve_linear_explicit(spec, "shift", tree=ext)


def test_explicit_pure_m_equals_direct():
    spec = linear_spec(N=8, xi="0", m="cos(B1)")
    assert solve_linear_explicit(spec).root_Y == pytest.approx(solve_linear_direct(spec).root_Y, abs=1e-14)


def test_explicit_converges_to_direct_2d():
    gaps = []
    for N in (2, 4, 8):
        spec = linear_spec(N=N, theta=THETA_2D, xi="sin(B1 + B2)", b=[0.3, -0.2], m=0.1)
        gaps.append(abs(solve_linear_explicit(spec).root_Y - solve_linear_direct(spec).root_Y))
    assert gaps[0] > gaps[1] > gaps[2]


def test_dissipative_linear_check():
    spec = linear_spec(mu=1.0, a=-0.5, c=[[0.2]])
    tree = spec.build_tree()
    rep = check_dissipative_linear(spec, tree)
    assert not rep
    assert rep.metrics["max_a_plus_2Gc"] == pytest.approx(-0.3)
    with pytest.raises(PreconditionError):
        lemma_ey_bound(spec, 1.0, solve_linear_direct(spec, tree))
    with pytest.raises(ConfigError):
        check_dissipative_linear(linear_spec(a=-1.0), tree)


def test_lemma_bound_rejects_small_rho():
    spec = linear_spec(mu=1.0, a=-1.0, m=0.5)
    with pytest.raises(PreconditionError):
        lemma_ey_bound(spec, 0.1, solve_linear_direct(spec))


def test_lemma_bound_holds_2d():
    spec = linear_spec(N=6, theta=THETA_2D, mu=0.5, xi="cos(B1)*sin(B2)", a=-1.0, b=[0.2, 0.1],
                       c=[[0.1, 0.0], [0.0, 0.1]], m="0.2*sin(B2)")
    rep = lemma_ey_bound(spec, 0.2, solve_linear_direct(spec))
    assert rep, rep.to_dict()


def test_generator_order_and_comparison():
    g1, g2 = gen("-y"), gen("-y + 0.1")
    assert check_generator_order(g1, g2, THETA)
    rep = check_generator_order(g2, g1, THETA)
    assert not rep and rep.witness["gap"] == pytest.approx(0.1)
    tree = build_tree(THETA, TimeGrid(0.0, 1.0, 6))
    with pytest.raises(PreconditionError):
        compare_solutions(g2, g1, ZERO, ZERO, tree)
    with pytest.raises(PreconditionError):
        compare_solutions(g1, g2, PathFunctional.constant(1.0), ZERO, tree)
    rep = compare_solutions(g1, g2, ZERO, ZERO, tree)
    assert rep and rep.metrics["violations"] == 0


def test_g_order_uses_covariances():
    # g2 - g1 = diag(1, -0.5) is nonnegative against every theta theta^T with sigma_22^2 <= 2 sigma_11^2
    g1 = gen("0", [["0", "0"], ["0", "0"]], dim=2)
    g2 = gen("0", [["1", "0"], ["0", "-0.5"]], dim=2)
    assert check_generator_order(g1, g2, THETA_2D)
    g3 = gen("0", [["0.1", "0"], ["0", "-1"]], dim=2)
    assert not check_generator_order(g1, g3, THETA_2D)


def test_minimal_horizon_and_bounds():
    g = gen("-y + 1", M0=1.0, mu=1.0)
    assert uniform_bound(g, THETA) == pytest.approx(2.0)
    assert minimal_horizon(g, THETA, 1e-2) == math.ceil(math.log(200))
    assert minimal_horizon(g, THETA, 5.0) == 1
    with pytest.raises(InputError):
        minimal_horizon(g, THETA, 0.0)


def test_fit_decay_rate_exact():
    its = [(n, 1 - 0.7 * math.exp(-1.3 * n)) for n in range(2, 7)]
    assert fit_decay_rate(its) == pytest.approx(1.3)
    with pytest.raises(InputError):
        fit_decay_rate(its[:2])


def test_infinite_horizon_driver():
    g = gen("-y + 1", M0=1.0, Lz=0.0, mu=1.0)
    res = solve_infinite_horizon(g, THETA, dt=0.25, tol=0.05, keep_solutions=True)
    assert res.n_min == minimal_horizon(g, THETA, 0.05)
    assert res.n_used == res.n_min
    # with zero terminal data the ODE limit is 1
    assert res.y0 == pytest.approx(1.0, abs=res.tail_bound + 0.1)
    ns = sorted(res.solutions)
    assert truncation_gap(res.solutions[ns[0]], res.solutions[ns[-1]], g, THETA, res.bound_constant)
    with pytest.raises(InputError):
        truncation_gap(res.solutions[ns[-1]], res.solutions[ns[0]], g, THETA)


def test_infinite_horizon_steps_per_horizon():
    g = gen("-y + 0.5*sin(z1) + 0.5", M0=0.5, Lz=0.5, mu=1.0)
    res = solve_infinite_horizon(g, THETA, steps_per_horizon=8, horizons=[2, 4, 6], keep_solutions=True)
    assert [n for n, _ in res.iterates] == [2, 4, 6]
    assert all(s.tree.steps == 8 for s in res.solutions.values())


def test_infinite_horizon_preconditions():
    with pytest.raises(ConfigError):
        solve_infinite_horizon(gen("-y"), THETA, dt=0.25)
    with pytest.raises(PreconditionError):
        solve_infinite_horizon(gen("-0.5*y", mu=1.0), THETA, dt=0.25)
    with pytest.raises(InputError):
        solve_infinite_horizon(gen("-y", mu=1.0), THETA)


def test_bound_constant_nonnegative():
    assert calibrate_bound_constant(gen("-y + 1", M0=1.0, mu=1.0), THETA) >= 0.0


def test_compare_infinite():
    g1 = gen("-y + 0.5", M0=0.5, mu=1.0)
    g2 = gen("-y + 0.5 + 0.2*cos(z1)**2", M0=0.7, Lz=0.4, mu=1.0)
    rep = compare_infinite(g1, g2, THETA, dt=0.25, tol=0.1, horizons=[2, 3])
    assert rep, rep.to_dict()
