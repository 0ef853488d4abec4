import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gbsde.errors import DomainError, InputError, NumericError
from gbsde.extspace import (ExtendedConstruction, IndexMaps, LinearCoefficients, build_lambda, build_theta_tilde,
                            d_tilde, girsanov_drift, index_bar, index_h, index_hat, index_tables,
                            lambda_from_arrays, random_well_conditioned, render_symbolic, verify_bijections,
                            verify_drift_identity, verify_product_structure)
from gbsde.gcore import VolatilitySet

from oracles import extended_coordinates, golden_tables_d3, product_blocks


@pytest.mark.parametrize("d", range(1, 7))
def test_d_tilde_counts_coordinates(d):
    assert d_tilde(d) == len(extended_coordinates(d))


def test_d_tilde_domain():
    with pytest.raises(DomainError):
        d_tilde(0)


def test_golden_tables():
    assert index_tables(3) == golden_tables_d3()


@pytest.mark.parametrize("d", range(1, 7))
def test_index_maps_match_enumeration(d):
    maps = IndexMaps.build(d)
    for l, (kind, idx) in enumerate(extended_coordinates(d), start=1):
        assert maps.classify(l) == (kind, idx)
    assert verify_bijections(d)


@pytest.mark.parametrize("args", [(1, 1, 3), (2, 1, 3), (0, 2, 3), (1, 4, 3)])
def test_index_h_domain(args):
    with pytest.raises(DomainError):
        index_h(*args)


def test_index_hat_and_bar_domain():
    with pytest.raises(DomainError):
        index_hat(2, 2, 3)
    with pytest.raises(DomainError):
        index_bar(2, 1, 1, 3)
    with pytest.raises(DomainError):
        index_bar(1, 2, 4, 3)
    with pytest.raises(DomainError):
        IndexMaps.build(2).classify(9)


def test_labels_d2():
    assert IndexMaps.build(2).labels() == ["B^1", "B^2", "Bdot^1", "Bdot^2", "Bhat^1,2", "Bhat^2,1",
                                           "Bbar^1,2,1", "Bbar^1,2,2"]


def test_theta_tilde_d1_exact():
    tt = build_theta_tilde([[0.5]])
    np.testing.assert_array_equal(tt, [[0.5, 0.0], [2.0, 1.0]])
    np.testing.assert_array_equal(tt @ tt.T, [[0.25, 1.0], [1.0, 5.0]])


def test_theta_tilde_is_block_lower_triangular():
    theta = random_well_conditioned(np.random.default_rng(0), 3)
    tt = build_theta_tilde(theta)
    np.testing.assert_array_equal(tt[:3, 3:], 0.0)
    np.testing.assert_array_equal(tt[3:, 3:], np.eye(d_tilde(3) - 3))


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 4), st.integers(0, 2 ** 32 - 1))
def test_product_blocks_property(d, seed):
    theta = random_well_conditioned(np.random.default_rng(seed), d)
    tt = build_theta_tilde(theta)
    np.testing.assert_allclose((tt @ tt.T)[:, :d], product_blocks(theta), atol=1e-10)
    assert verify_product_structure(theta)


def test_singular_theta_rejected():
    with pytest.raises(NumericError):
        build_theta_tilde([[1.0, 2.0], [2.0, 4.0]])


def test_extended_volatility_set():
    theta = VolatilitySet(np.array([0.5, 1.0]))
    ext = ExtendedConstruction.from_volatility(theta)
    assert ext.d_tilde == 2
    assert ext.volatility_set().dim == 2
    assert ext.labels == ("B^1", "Bdot^1")


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 4), st.integers(0, 2 ** 32 - 1))
def test_lambda_removes_drift(d, seed):
    # sum_l <B^m, Btilde^l> Lambda^l = b^m + sum_ij d^{ij,m} gamma^{ij}, read off theta_tilde theta_tilde^T
    rng = np.random.default_rng(seed)
    theta = random_well_conditioned(rng, d)
    b = rng.normal(size=d)
    dc = rng.normal(size=(d, d, d))
    dc = 0.5 * (dc + dc.transpose(1, 0, 2))
    lam = lambda_from_arrays(b, dc)
    tt = build_theta_tilde(theta)
    gamma = theta @ theta.T
    drift = (tt @ tt.T)[:d] @ lam
    np.testing.assert_allclose(drift, b + np.einsum("ijm,ij->m", dc, gamma), atol=1e-9)


def test_lambda_d1_layout():
    np.testing.assert_array_equal(lambda_from_arrays([0.3], [[[0.7]]]), [0.7, 0.3])


def test_lambda_rejects_asymmetric_d():
    dc = np.zeros((2, 2, 2))
    dc[0, 1, 0] = 1.0
    with pytest.raises(InputError):
        lambda_from_arrays(np.zeros(2), dc)


def test_linear_coefficients_constants_and_expressions():
    coeffs = LinearCoefficients.create(1, a=-1.0, b=["sin(B1)"], m="2")
    assert coeffs.constant("a") == -1.0
    assert coeffs.constant("b") is None
    assert coeffs.constant("m") == 2.0
    B = np.array([[0.0], [np.pi / 2]])
    vals = coeffs.evaluate(0.0, B, np.zeros((2, 1, 1)))
    np.testing.assert_allclose(vals["b"][:, 0], [0.0, 1.0])
    np.testing.assert_allclose(vals["a"], [-1.0, -1.0])
    lam = build_lambda(coeffs, 0.0, [np.pi / 2], [[0.0]])
    np.testing.assert_allclose(lam, [0.0, 1.0])


def test_linear_coefficients_shape_and_symmetry():
    with pytest.raises(InputError):
        LinearCoefficients.create(2, b=[1.0])
    coeffs = LinearCoefficients.create(2, c=[[0.0, 1.0], [0.0, 0.0]])
    rep = coeffs.check_symmetry(0.0, np.zeros((1, 2)), np.zeros((1, 2, 2)))
    assert not rep
    assert rep.metrics["c"] == 1.0


def test_symbolic_drift_d2():
    out = render_symbolic(girsanov_drift(1, 2))
    assert out == {"ds": {"b^1": 1}, "<B>^{11}": {"d^{11,1}": 1}, "<B>^{12}": {"d^{12,1}": 2},
                   "<B>^{22}": {"d^{22,1}": 1}}


@pytest.mark.parametrize("d", [1, 2, 3, 4])
def test_drift_identity_report(d):
    assert verify_drift_identity(d)


def test_girsanov_drift_domain():
    with pytest.raises(DomainError):
        girsanov_drift(3, 2)
