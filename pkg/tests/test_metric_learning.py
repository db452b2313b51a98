import numpy as np
import pytest

from errors import DimensionMismatchError, IndefiniteInputError, InsufficientSamplesError
from estimators import ScalarGain, emf, scm
from metric_learning import (
    MetricMatrix, bifidelity_mean, estimate_metric, gmml_metric, mean_relative_error,
    metric_errors, similarity_dissimilarity,
)
from spd_core import SpdMatrix, geodesic, random_spd, spd_inverse


def test_similarity_dissimilarity(rng):
    g0, g1 = random_spd(2, rng), random_spd(2, rng)
    m0, m1 = np.array([1.0, 0.0]), np.array([0.0, 2.0])
    T, D = similarity_dissimilarity(g0, g1, m0, m1)
    assert np.allclose(T.entries, g0.entries + g1.entries)
    assert np.allclose(D.entries - T.entries, [[1.0, -2.0], [-2.0, 4.0]])
    with pytest.raises(DimensionMismatchError):
        similarity_dissimilarity(g0, g1, m0, np.zeros(3))


def test_gmml_endpoints_and_geodesic(rng):
    T, D = random_spd(3, rng), random_spd(3, rng)
    assert np.allclose(gmml_metric(T, D, 0.0).matrix.entries, spd_inverse(T).entries)
    assert np.allclose(gmml_metric(T, D, 1.0).matrix.entries, D.entries)
    mid = gmml_metric(T, D, 0.3, provenance="hf")
    assert mid.provenance == "hf" and mid.t == 0.3
    assert np.allclose(mid.matrix.entries, geodesic(spd_inverse(T), D, 0.3).entries)
    with pytest.raises(ValueError):
        gmml_metric(T, D, 1.5)


def test_indefinite_covariance_is_not_repaired():
    indefinite = emf(np.eye(2), np.diag([3.0, 1.0]), np.eye(2), ScalarGain(1.0))
    with pytest.raises(IndefiniteInputError):
        estimate_metric(indefinite, np.eye(2), np.zeros(2), np.ones(2))
    with pytest.raises(IndefiniteInputError):
        gmml_metric(np.diag([1.0, -1.0]), np.eye(2))


def test_estimate_metric_accepts_scm(rng):
    x0 = rng.standard_normal((50, 2))
    x1 = rng.standard_normal((50, 2)) + 1.0
    metric = estimate_metric(scm(x0), scm(x1), x0.mean(axis=0), x1.mean(axis=0), 0.1)
    assert metric.matrix.min_eigenvalue() > 0


def test_metric_norm():
    metric = MetricMatrix(SpdMatrix(np.diag([4.0, 1.0])), 0.1)
    assert np.allclose(metric.norm(np.array([[1.0, 0.0], [0.0, 3.0]])), [2.0, 3.0])


def test_mean_relative_error(rng):
    ref = MetricMatrix(random_spd(3, rng), 0.1)
    points = rng.standard_normal((20, 3))
    assert mean_relative_error(ref, ref, points) == 0.0
    scaled = SpdMatrix(4.0 * ref.matrix.entries)
    assert mean_relative_error(scaled, ref, points) == pytest.approx(1.0)


def test_mean_relative_error_zero_points(rng):
    ref = random_spd(2, rng)
    points = np.array([[0.0, 0.0], [1.0, 1.0]])
    assert mean_relative_error(SpdMatrix(9.0 * ref.entries), ref, points) == pytest.approx(2.0)
    with pytest.raises(InsufficientSamplesError):
        mean_relative_error(ref, ref, np.zeros((3, 2)))
    with pytest.raises(InsufficientSamplesError):
        mean_relative_error(ref, ref, np.empty((0, 2)))
    with pytest.raises(DimensionMismatchError):
        mean_relative_error(ref, ref, np.ones((2, 3)))


def test_metric_errors(rng):
    a = random_spd(2, rng)
    assert metric_errors(a, a) == (0.0, pytest.approx(0.0, abs=1e-20))
    frob, intrinsic = metric_errors(SpdMatrix(np.e * np.eye(2)), SpdMatrix(np.eye(2)))
    assert frob == pytest.approx(2 * (np.e - 1) ** 2)
    assert intrinsic == pytest.approx(2.0)


def test_bifidelity_mean(rng):
    hi = rng.standard_normal((10, 2))
    extra = rng.standard_normal((40, 2))
    assert np.allclose(bifidelity_mean(hi, hi, hi), hi.mean(axis=0))
    shifted = bifidelity_mean(hi, hi, np.vstack([hi, extra]))
    assert np.allclose(shifted, np.vstack([hi, extra]).mean(axis=0))
    constant = np.ones((10, 2))
    assert np.allclose(bifidelity_mean(hi, constant, extra), hi.mean(axis=0))


def test_bifidelity_mean_validation(rng):
    with pytest.raises(DimensionMismatchError):
        bifidelity_mean(np.ones((3, 2)), np.ones((4, 2)), np.ones((5, 2)))
    with pytest.raises(InsufficientSamplesError):
        bifidelity_mean(np.ones((1, 2)), np.ones((1, 2)), np.ones((5, 2)))
