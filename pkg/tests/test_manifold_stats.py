import numpy as np
import pytest

from coupled_models import WrappedGaussian, block_coupled_gamma
from errors import ConvergenceError, DimensionMismatchError, StructureError
from manifold_stats import (
    FidelityStructure, PilotEnsemble, batched_log_at, estimate_covariance_operator,
    frechet_mean, mahalanobis_sq, pooled_fidelity_means, product_frechet_mean,
    riemannian_variance, tangent_log_likelihood, tangent_residual, tangent_vectors,
    weighted_covariance_operator, weighted_mahalanobis_sq,
)
from spd_core import SpdMatrix, intrinsic_distance, random_spd, riemannian_log
from tangent_algebra import (
    TangentOperator, build_congruence_operator, regularized_inverse, tangent_size,
)


def test_structure_slots():
    s = FidelityStructure.running_example()
    assert s.N == 3 and s.K == 2 and s.L == 1
    assert s.slot_fidelity == (0, 1, 1)
    assert s.slot_group == (0, 0, 1)
    assert s.slots_of_fidelity(1) == [1, 2]
    assert s.reference_slot(1) == 1
    assert FidelityStructure.from_dict(s.to_dict()) == s


@pytest.mark.parametrize("L, groups", [
    (1, ((0,),)),           # точность 1 без данных
    (1, ((1,),)),           # нет высокой точности
    (1, ((0, 0, 1),)),      # повтор внутри группы
    (1, ((0, 2),)),         # выход за 0..L
    (0, ()),
])
def test_structure_validation(L, groups):
    with pytest.raises(StructureError):
        FidelityStructure(L=L, groups=groups)


def test_batched_log_matches_single(rng):
    base = random_spd(3, rng)
    samples = [random_spd(3, rng) for _ in range(4)]
    batch = batched_log_at(base, np.stack([s.entries for s in samples]))
    for b, s in zip(batch, samples):
        assert np.allclose(b, riemannian_log(base, s).entries, atol=1e-10)


def test_frechet_mean_of_commuting_matrices_is_geometric_mean():
    samples = [SpdMatrix(np.diag([1.0, 4.0])), SpdMatrix(np.diag([4.0, 1.0]))]
    mean = frechet_mean(samples)
    assert np.allclose(mean.entries, 2.0 * np.eye(2), atol=1e-9)


def test_frechet_mean_stationarity(rng):
    samples = [random_spd(3, rng) for _ in range(20)]
    mean = frechet_mean(samples)
    grad = np.mean([riemannian_log(mean, s).entries for s in samples], axis=0)
    assert np.linalg.norm(grad) <= 1e-9 * max(1.0, np.linalg.norm(mean.entries))


def test_frechet_mean_equivariant(rng):
    samples = [random_spd(2, rng) for _ in range(10)]
    y = random_spd(2, rng)
    moved = [SpdMatrix(y.entries @ s.entries @ y.entries) for s in samples]
    lhs = frechet_mean(moved).entries
    rhs = y.entries @ frechet_mean(samples).entries @ y.entries
    assert np.allclose(lhs, rhs, rtol=1e-8)


def test_frechet_mean_errors(rng):
    with pytest.raises(DimensionMismatchError):
        frechet_mean([])
    with pytest.raises(ConvergenceError) as info:
        frechet_mean([random_spd(3, rng) for _ in range(5)], tol=0.0, max_iter=2)
    assert info.value.residual is not None


def test_single_sample_mean_and_variance(rng):
    a = random_spd(3, rng)
    assert frechet_mean([a]) is a
    assert riemannian_variance([a, a], a) == pytest.approx(0.0, abs=1e-20)


def test_product_frechet_mean_slotwise(rng):
    draws = [(random_spd(2, rng), random_spd(2, rng)) for _ in range(6)]
    means = product_frechet_mean(draws)
    assert np.allclose(means[1].entries, frechet_mean([d[1] for d in draws]).entries)


def _wrapped_pilot(rng, size=1000):
    structure = FidelityStructure.running_example()
    sigmas = (random_spd(2, rng), random_spd(2, rng))
    gamma = block_coupled_gamma(2, structure, scale=0.01, correlation=0.6)
    model = WrappedGaussian((sigmas[0], sigmas[1], sigmas[1]), gamma)
    return structure, sigmas, gamma, PilotEnsemble(structure, tuple(model.sample(rng, size)))


def test_pilot_requires_slot_count(rng):
    with pytest.raises(StructureError):
        PilotEnsemble(FidelityStructure.running_example(), ((random_spd(2, rng),),))


def test_pooled_means_and_covariance_recover_generator(rng):
    structure, sigmas, gamma, pilot = _wrapped_pilot(rng, size=20000)
    means = pooled_fidelity_means(pilot)
    for mean, sigma in zip(means, sigmas):
        assert intrinsic_distance(mean, sigma) < 0.02
    estimate = estimate_covariance_operator(pilot, means)
    assert estimate.structure is structure
    error = np.linalg.norm(estimate.matrix - gamma.matrix, 2)
    assert error <= 0.1 * np.linalg.norm(gamma.matrix, 2)
    q = tangent_size(2)
    assert np.all(estimate.matrix[:2 * q, 2 * q:] == 0.0)


def test_variance_equals_trace_of_covariance(rng):
    _, _, _, pilot = _wrapped_pilot(rng, size=200)
    samples = pilot.slot_samples(0)
    mean = frechet_mean(samples)
    single = PilotEnsemble(FidelityStructure.single(), tuple((s,) for s in samples))
    gamma = weighted_covariance_operator(single, [mean])
    assert riemannian_variance(samples, mean) == pytest.approx(gamma.trace(), rel=1e-10)


def test_tangent_vectors_shape(rng):
    structure, sigmas, _, pilot = _wrapped_pilot(rng, size=10)
    v = tangent_vectors(pilot, list(sigmas))
    assert v.shape == (10, structure.N * tangent_size(2))
    with pytest.raises(StructureError):
        tangent_vectors(pilot, [sigmas[0]])


def test_weighted_covariance_relates_by_congruence(rng):
    _, sigmas, _, pilot = _wrapped_pilot(rng, size=50)
    means = list(sigmas)
    plain = estimate_covariance_operator(pilot, means, zero_cross_groups=False)
    weighted = weighted_covariance_operator(pilot, means)
    g = build_congruence_operator([means[f] for f in pilot.structure.slot_fidelity]).matrix
    assert np.allclose(weighted.matrix, plain.matrix @ g, atol=1e-10)


def test_mahalanobis_zero_at_data(rng):
    data = [random_spd(2, rng), random_spd(2, rng)]
    gamma_inv = TangentOperator.identity(2, 2)
    assert mahalanobis_sq(data, data, gamma_inv) == pytest.approx(0.0, abs=1e-20)
    assert np.allclose(tangent_residual(data, data), 0.0, atol=1e-12)


def test_mahalanobis_identity_operator_is_sum_of_squared_logs(rng):
    data = [random_spd(2, rng), random_spd(2, rng)]
    sigma = [random_spd(2, rng), random_spd(2, rng)]
    expected = sum(np.sum(riemannian_log(s, d).entries ** 2) for d, s in zip(data, sigma))
    assert mahalanobis_sq(data, sigma, TangentOperator.identity(2, 2)) == pytest.approx(expected)
    with pytest.raises(DimensionMismatchError):
        mahalanobis_sq(data, sigma, TangentOperator.identity(2, 3))


def test_weighted_and_unweighted_mahalanobis_agree(rng):
    for _ in range(10):
        sigma = [random_spd(3, rng) for _ in range(3)]
        gamma = TangentOperator(3, 0.05 * random_spd(3 * tangent_size(3), rng).entries)
        data = WrappedGaussian(tuple(sigma), gamma).sample(rng, 1)[0]
        plain = mahalanobis_sq(data, sigma, regularized_inverse(gamma, eps=0.0))
        weighted = weighted_mahalanobis_sq(data, sigma, gamma)
        assert weighted == pytest.approx(plain, rel=1e-8)


def test_log_likelihood_minimized_at_zero_residual(rng):
    sigma = [random_spd(2, rng)]
    gamma = TangentOperator.identity(2, 1)
    at_mean = tangent_log_likelihood(sigma, sigma, gamma)
    assert at_mean == pytest.approx(0.5 * 3 * np.log(2 * np.pi))
    assert tangent_log_likelihood([random_spd(2, rng)], sigma, gamma) > at_mean


def test_covariance_and_mahalanobis_follow_congruence(rng):
    structure, _, _, pilot = _wrapped_pilot(rng, size=200)
    y = random_spd(2, rng, condition=5.0)

    def move(s):
        return SpdMatrix(y.inverse @ s.entries @ y.inverse)

    means = pooled_fidelity_means(pilot)
    gamma = estimate_covariance_operator(pilot, means)
    moved_pilot = PilotEnsemble(structure, tuple(tuple(move(s) for s in d) for d in pilot.draws))
    moved_means = [move(m) for m in means]
    moved = estimate_covariance_operator(moved_pilot, moved_means)
    g = build_congruence_operator([y] * structure.N).matrix
    expected = g @ gamma.matrix @ g
    scale = np.linalg.norm(expected, 2)
    assert np.allclose(moved.matrix, expected, rtol=1e-8, atol=1e-10 * scale)

    pooled = pooled_fidelity_means(moved_pilot)
    for a, b in zip(pooled, moved_means):
        assert intrinsic_distance(a, b) < 1e-6

    data = pilot.draws[0]
    sigma = [means[f] for f in structure.slot_fidelity]
    plain = mahalanobis_sq(data, sigma, regularized_inverse(gamma, eps=0.0))
    transported = mahalanobis_sq([move(s) for s in data], [move(s) for s in sigma],
                                 regularized_inverse(moved, eps=0.0))
    assert transported == pytest.approx(plain, rel=1e-7)
