import numpy as np
import pytest

from errors import DimensionMismatchError, NotPositiveDefiniteError
from spd_core import (
    SpdMatrix, SymMatrix, congruence, divided_differences, frechet_derivative, geodesic,
    generalized_eigenvalues, intrinsic_distance, product_distance, product_geodesic, random_spd,
    riemannian_exp, riemannian_log, spd_inner, spd_inverse, spd_log, spd_power, spd_sqrt,
    sym_exp, sym_log,
)


def test_construction_symmetrizes_and_caches_spectrum():
    a = SpdMatrix(np.array([[2.0, 1.0], [0.0, 2.0]]))
    assert np.allclose(a.entries, [[2.0, 0.5], [0.5, 2.0]])
    lam, vecs = a.eig
    assert lam == pytest.approx([1.5, 2.5])
    assert np.allclose((vecs * lam) @ vecs.T, a.entries)


@pytest.mark.parametrize("entries", [
    np.diag([1.0, 0.0]),
    np.diag([1.0, -1.0]),
    np.diag([1.0, 1e-14]),
])
def test_rejects_non_positive_definite(entries):
    with pytest.raises(NotPositiveDefiniteError):
        SpdMatrix(entries)


def test_rejects_non_square():
    with pytest.raises(DimensionMismatchError):
        SpdMatrix(np.ones((2, 3)))


def test_spectral_functions_diagonal(diagonal_spd):
    assert np.allclose(spd_sqrt(diagonal_spd).entries, np.diag([1.0, np.sqrt(2.0), 2.0]))
    assert np.allclose(spd_inverse(diagonal_spd).entries, np.diag([1.0, 0.5, 0.25]))
    assert np.allclose(spd_log(diagonal_spd).entries, np.diag(np.log([1.0, 2.0, 4.0])))
    assert np.allclose(spd_power(diagonal_spd, 0.5).entries, spd_sqrt(diagonal_spd).entries)


def test_sym_exp_log_inverse(rng):
    x = rng.standard_normal((4, 4))
    x = 0.5 * (x + x.T)
    assert np.allclose(sym_log(sym_exp(x)).entries, x, atol=1e-10)


def test_log_exp_round_trip(spd_pair):
    a, b = spd_pair
    back = riemannian_exp(a, riemannian_log(a, b))
    assert np.allclose(back.entries, b.entries, rtol=1e-10, atol=1e-12)


def test_log_at_self_is_zero(spd_pair):
    a, _ = spd_pair
    assert np.allclose(riemannian_log(a, a).entries, 0.0, atol=1e-12)
    assert riemannian_exp(a, np.zeros((3, 3))) is a


def test_geodesic_endpoints_and_midpoint(spd_pair):
    a, b = spd_pair
    assert geodesic(a, b, 0.0) is a
    assert geodesic(a, b, 1.0) is b
    mid = geodesic(a, b, 0.5)
    total = intrinsic_distance(a, b)
    assert intrinsic_distance(a, mid) == pytest.approx(0.5 * total, rel=1e-9)
    assert intrinsic_distance(mid, b) == pytest.approx(0.5 * total, rel=1e-9)


def test_geodesic_rejects_t_outside_unit_interval(spd_pair):
    a, b = spd_pair
    with pytest.raises(ValueError):
        geodesic(a, b, 1.5)


def test_distance_of_scaled_identity():
    a = SpdMatrix(np.eye(3))
    b = SpdMatrix(np.e * np.eye(3))
    assert intrinsic_distance(a, b) == pytest.approx(np.sqrt(3.0))


def test_distance_symmetric_and_affine_invariant(spd_pair, rng):
    a, b = spd_pair
    y = random_spd(3, rng)
    d = intrinsic_distance(a, b)
    assert intrinsic_distance(b, a) == pytest.approx(d, rel=1e-10)
    assert intrinsic_distance(congruence(y, a), congruence(y, b)) == pytest.approx(d, rel=1e-10)


def test_log_congruence_equivariance(spd_pair, rng):
    a, b = spd_pair
    y = random_spd(3, rng)
    lhs = riemannian_log(congruence(y, a), congruence(y, b))
    rhs = congruence(y, riemannian_log(a, b))
    assert isinstance(rhs, SymMatrix)
    assert np.allclose(lhs.entries, rhs.entries, rtol=1e-10, atol=1e-12)


def test_generalized_eigenvalues(diagonal_spd):
    lam = generalized_eigenvalues(SpdMatrix(np.eye(3)), diagonal_spd)
    assert lam == pytest.approx([1.0, 2.0, 4.0])


def test_spd_inner_at_identity_is_frobenius(rng):
    u = rng.standard_normal((3, 3))
    v = rng.standard_normal((3, 3))
    u, v = u + u.T, v + v.T
    assert spd_inner(SpdMatrix(np.eye(3)), u, v) == pytest.approx(float(np.sum(u * v)))


def test_divided_differences_coincident_eigenvalues():
    lam = np.array([1.0, 1.0, 2.0])
    F = divided_differences(lam, np.log, lambda x: 1.0 / x)
    assert F[0, 1] == pytest.approx(1.0)
    assert F[0, 2] == pytest.approx(np.log(2.0))


def test_frechet_derivative_matches_finite_difference(spd_pair, rng):
    a, _ = spd_pair
    e = rng.standard_normal((3, 3))
    e = 0.5 * (e + e.T)
    h = 1e-6
    numeric = (sym_log(a.entries + h * e).entries - sym_log(a.entries - h * e).entries) / (2 * h)
    analytic = frechet_derivative(a, np.log, lambda x: 1.0 / x, e).entries
    assert np.allclose(analytic, numeric, atol=1e-6)


def test_product_distance_and_geodesic(spd_pair):
    a, b = spd_pair
    assert product_distance([a, a], [b, b]) == pytest.approx(np.sqrt(2.0) * intrinsic_distance(a, b))
    mids = product_geodesic([a, b], [b, a], 0.5)
    assert np.allclose(mids[0].entries, mids[1].entries, atol=1e-10)
    with pytest.raises(DimensionMismatchError):
        product_distance([a], [a, b])


def test_random_spd_condition(rng):
    a = random_spd(5, rng, condition=100.0)
    assert 1.0 <= a.condition_number() <= 100.0 + 1e-9
