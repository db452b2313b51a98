from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest

from coupled_models import WrappedGaussian, block_coupled_gamma
from errors import (
    ConfigError, DegenerateGainError, DimensionMismatchError, IndefiniteInputError,
    InsufficientSamplesError, MrmfError, StructureError,
)
from estimators import (
    MrmfProblem, MrmfSettings, OperatorGain, ScalarGain, control_variate_residual, emf, lemf,
    lambda_sweep, mrmf_fixed_low, mrmf_gradient, mrmf_objective, mrmf_solve,
    operator_gain_from_pilot, precondition, scalar_gain_from_pilot, scm, select_lambda,
    tune_lambda,
)
from manifold_stats import (
    FidelityStructure, mahalanobis_sq, tangent_log_likelihood, tangent_residual,
)
from spd_core import SpdMatrix, geodesic, intrinsic_distance, random_spd, spd_sqrt, sym_exp
from tangent_algebra import (
    TangentOperator, extract_block, sym_to_flat, tangent_size, unflat_array,
)

ANALYTIC = MrmfSettings(gradient="analytic")
TIGHT = MrmfSettings(tol=1e-11, max_iter=20000, gradient="analytic")


def _inverse(gamma: TangentOperator) -> TangentOperator:
    return TangentOperator(gamma.dim, np.linalg.inv(gamma.matrix), gamma.structure)


def _running_problem(rng, dim=2, lambdas=(0.1, 0.1), settings=ANALYTIC):
    structure = FidelityStructure.running_example()
    sigma_hi, sigma_lo = random_spd(dim, rng), random_spd(dim, rng)
    gamma = block_coupled_gamma(dim, structure, scale=0.05, correlation=0.7)
    data = WrappedGaussian((sigma_hi, sigma_lo, sigma_lo), gamma).sample(rng, 1)[0]
    return MrmfProblem(structure=structure, data=data, gamma_inv=_inverse(gamma),
                       lambdas=lambdas, settings=settings)


def _coupled_pair(rng, dim=2):
    structure = FidelityStructure.coupled_pair()
    gamma = TangentOperator(
        dim, 0.05 * random_spd(2 * tangent_size(dim), rng, condition=5.0).entries, structure)
    model = WrappedGaussian((random_spd(dim, rng), random_spd(dim, rng)), gamma)
    s_hi, s_lo = model.sample(rng, 1)[0]
    s_bar = model.sample(rng, 1)[0][1]
    return gamma, s_hi, s_lo, s_bar


# ----------------------------------------------------------------------
# SCM, EMF, LEMF
# ----------------------------------------------------------------------

def test_scm_unbiased_normalization():
    x = np.array([[1.0, 0.0], [-1.0, 0.0], [0.0, 2.0], [0.0, -2.0]])
    result = scm(x)
    assert np.allclose(result.matrix, np.diag([2.0 / 3.0, 8.0 / 3.0]))
    assert result.sample_count == 4 and result.is_spd


def test_scm_rank_deficient_flagged(rng):
    result = scm(rng.standard_normal((3, 4)))
    assert not result.is_spd
    with pytest.raises(IndefiniteInputError):
        result.as_spd()
    with pytest.raises(InsufficientSamplesError):
        scm(np.ones((1, 3)))


def test_emf_formula_and_indefinite_flag():
    hi = np.diag([1.0, 1.0])
    lo = np.diag([3.0, 1.0])
    bar = np.diag([1.0, 1.0])
    estimate = emf(hi, lo, bar, ScalarGain(1.0))
    assert np.allclose(estimate.matrix, np.diag([-1.0, 1.0]))
    assert estimate.min_eig == pytest.approx(-1.0)
    assert not estimate.is_spd
    with pytest.raises(IndefiniteInputError):
        estimate.as_spd()


def test_emf_unbiased_with_known_mean(rng):
    sigma = random_spd(2, rng)
    total = np.zeros((2, 2))
    trials = 4000
    for _ in range(trials):
        x = rng.multivariate_normal(np.zeros(2), sigma.entries, size=8)
        y = x + 0.3 * rng.standard_normal((8, 2))
        total += emf(scm(x), scm(y), sigma.entries + 0.09 * np.eye(2), ScalarGain(0.8)).matrix
    assert np.allclose(total / trials, sigma.entries, atol=0.05 * np.abs(sigma.entries).max())


def test_lemf_reduces_to_hf_and_is_spd(rng):
    hi, lo, bar = (random_spd(3, rng) for _ in range(3))
    assert np.allclose(lemf(hi, lo, bar, ScalarGain(0.0)).entries, hi.entries)
    out = lemf(hi, lo, bar, ScalarGain(5.0))
    assert out.min_eigenvalue() > 0
    same = lemf(hi, hi, bar, ScalarGain(1.0))
    expected = SpdMatrix(bar.entries)
    assert np.allclose(same.entries, expected.entries, rtol=1e-10)


def test_lemf_rejects_singular_scm(rng):
    singular = scm(rng.standard_normal((2, 3)))
    with pytest.raises(IndefiniteInputError):
        lemf(singular, random_spd(3, rng), random_spd(3, rng), ScalarGain(1.0))


def test_scalar_gain_perfect_coupling(rng):
    hi = [random_spd(2, rng) for _ in range(50)]
    gain = scalar_gain_from_pilot(hi, hi)
    assert gain.alpha == pytest.approx(1.0)
    log_gain = scalar_gain_from_pilot(hi, hi, log_euclidean=True)
    assert log_gain.alpha == pytest.approx(1.0)


def test_scalar_gain_degenerate(rng):
    hi = [random_spd(2, rng) for _ in range(5)]
    constant = [SpdMatrix(np.eye(2))] * 5
    with pytest.raises(DegenerateGainError):
        scalar_gain_from_pilot(hi, constant)
    with pytest.raises(InsufficientSamplesError):
        scalar_gain_from_pilot(hi[:1], hi[:1])


def test_scalar_gain_uses_difference_with_reference(rng):
    hi = [random_spd(2, rng) for _ in range(200)]
    ref = [random_spd(2, rng) for _ in range(200)]
    gain = scalar_gain_from_pilot(hi, hi, ref)
    assert 0.0 < gain.alpha < 1.0


def test_operator_gain_perfect_coupling_is_identity(rng):
    hi = [random_spd(2, rng) for _ in range(100)]
    gain = operator_gain_from_pilot(hi, hi)
    delta = np.array([[0.3, -0.1], [-0.1, 0.2]])
    assert np.allclose(gain.apply(delta), delta, atol=1e-8)
    with pytest.raises(DimensionMismatchError):
        OperatorGain(gain.cross, TangentOperator.identity(2, 2))


def test_lemf_operator_gain_acts_on_log_differences(rng):
    q = tangent_size(2)
    cross = TangentOperator(2, rng.standard_normal((q, q)))
    auto = TangentOperator(2, random_spd(q, rng, condition=4.0).entries)
    hi, lo, bar = (random_spd(2, rng) for _ in range(3))
    out = lemf(hi, lo, bar, OperatorGain(cross, auto))
    expected = cross.matrix @ np.linalg.solve(auto.matrix, sym_to_flat(bar.log - lo.log))
    assert np.allclose(sym_to_flat(out.log - hi.log), expected, atol=1e-10)


def test_operator_gain_recovers_linear_log_coupling(rng):
    q = tangent_size(2)
    coupling = np.eye(q) + 0.3 * rng.standard_normal((q, q))
    lo = [random_spd(2, rng) for _ in range(60)]
    hi = [sym_exp(unflat_array(coupling @ sym_to_flat(s.log), 2)) for s in lo]
    gain = operator_gain_from_pilot(hi, lo, log_euclidean=True)
    assert not np.allclose(coupling, coupling[0, 0] * np.eye(q))
    delta = np.array([[0.2, -0.4], [-0.4, 0.1]])
    assert np.allclose(sym_to_flat(gain.apply(delta)), coupling @ sym_to_flat(delta), atol=1e-8)


# ----------------------------------------------------------------------
# Постановка MRMF
# ----------------------------------------------------------------------

def test_settings_validation():
    with pytest.raises(ConfigError):
        MrmfSettings(gradient="newton")
    with pytest.raises(ConfigError):
        MrmfSettings(shrink=1.0)
    with pytest.raises(ConfigError):
        MrmfSettings.from_dict({"unknown": 1})
    assert MrmfSettings.from_dict({"tol": 1e-6}).tol == 1e-6


def test_problem_validation(rng):
    problem = _running_problem(rng)
    with pytest.raises(StructureError):
        problem.with_lambdas((0.1,))
    with pytest.raises(StructureError):
        MrmfProblem(structure=problem.structure, data=problem.data[:2],
                    gamma_inv=problem.gamma_inv, lambdas=(0.0, 0.0))
    with pytest.raises(StructureError):
        MrmfProblem(structure=problem.structure, data=problem.data,
                    gamma_inv=problem.gamma_inv, lambdas=(0.0, 0.0),
                    fixed={0: problem.data[0], 1: problem.data[1]})


def test_active_slots_drop_fixed_only_groups(rng):
    problem = _running_problem(rng)
    fixed = MrmfProblem(structure=problem.structure, data=problem.data,
                        gamma_inv=problem.gamma_inv, lambdas=(0.0, 0.0),
                        fixed={1: problem.data[1]})
    assert problem.active_slots == [0, 1, 2]
    assert fixed.active_slots == [0, 1]
    assert fixed.free_fidelities == [0]


def test_objective_matches_mahalanobis_plus_penalty(rng):
    problem = _running_problem(rng, lambdas=(0.3, 0.7))
    s_hi, s_lo = random_spd(2, rng), random_spd(2, rng)
    expected = mahalanobis_sq(problem.data, [s_hi, s_lo, s_lo], problem.gamma_inv)
    expected += 0.3 * np.sum(np.log(s_hi.eigenvalues) ** 2)
    expected += 0.7 * np.sum(np.log(s_lo.eigenvalues) ** 2)
    assert mrmf_objective(problem, {0: s_hi, 1: s_lo}) == pytest.approx(expected, rel=1e-10)


@pytest.mark.parametrize("dim", [2, 3, 4])
def test_analytic_gradient_matches_finite_differences(rng, dim):
    problem = _running_problem(rng, dim=dim)
    for _ in range(3):
        roots = [spd_sqrt(random_spd(dim, rng)) for _ in problem.free_fidelities]
        analytic = mrmf_gradient(problem, roots, "analytic").to_flat()
        numeric = mrmf_gradient(problem, roots, "finite_difference").to_flat()
        assert np.linalg.norm(analytic - numeric) <= 1e-5 * max(1.0, np.linalg.norm(numeric))


def test_gradient_argument_checks(rng):
    problem = _running_problem(rng)
    with pytest.raises(ConfigError):
        mrmf_gradient(problem, [np.eye(2), np.eye(2)], "secant")
    with pytest.raises(DimensionMismatchError):
        mrmf_gradient(problem, [np.eye(2)])


# ----------------------------------------------------------------------
# Решение MRMF
# ----------------------------------------------------------------------

def test_fixed_low_with_consistent_reference_returns_hf_data(rng):
    gamma, s_hi, s_lo, _ = _coupled_pair(rng)
    report = mrmf_solve(mrmf_fixed_low(s_hi, s_lo, s_lo, _inverse(gamma), 0.0, ANALYTIC))
    assert report.converged
    assert np.allclose(report.sigma_hi.entries, s_hi.entries, rtol=1e-6, atol=1e-8)
    assert report.mahalanobis_value == pytest.approx(0.0, abs=1e-10)
    assert report.estimates[1] is s_lo


def test_fixed_low_minimum_is_schur_value(rng):
    gamma, s_hi, s_lo, s_bar = _coupled_pair(rng)
    report = mrmf_solve(mrmf_fixed_low(s_hi, s_lo, s_bar, _inverse(gamma), 0.0, TIGHT))
    v_lo = tangent_residual([s_lo], [s_bar])
    gamma_ll = extract_block(gamma, [1], [1]).matrix
    expected = float(v_lo @ np.linalg.solve(gamma_ll, v_lo))
    assert report.mahalanobis_value == pytest.approx(expected, rel=1e-6)


def test_fixed_low_solves_control_variate_equation(rng):
    for _ in range(3):
        gamma, s_hi, s_lo, s_bar = _coupled_pair(rng, dim=3)
        report = mrmf_solve(mrmf_fixed_low(s_hi, s_lo, s_bar, _inverse(gamma), 0.0, TIGHT))
        residual, scale = control_variate_residual(report.sigma_hi, s_hi, s_lo, s_bar, gamma)
        assert residual <= 1e-5 * scale


def test_fixed_low_takes_leading_block_of_larger_operator(rng):
    problem = _running_problem(rng)
    reduced = mrmf_fixed_low(problem.data[0], problem.data[1], problem.data[2],
                             problem.gamma_inv)
    assert reduced.gamma_inv.matrix.shape == (2 * tangent_size(2), 2 * tangent_size(2))


def test_penalty_pulls_towards_identity(rng):
    problem = _running_problem(rng, lambdas=(0.0, 0.0))
    identity = SpdMatrix(np.eye(2))
    distances = []
    for lam in (0.0, 1.0, 100.0):
        report = mrmf_solve(problem.with_lambdas((lam, lam)))
        distances.append(sum(intrinsic_distance(s, identity) ** 2 for s in report.estimates))
    assert distances[0] > distances[1] > distances[2]


def test_full_regression_converges_with_finite_differences(rng):
    problem = _running_problem(rng, settings=MrmfSettings(tol=1e-6, max_iter=20000))
    report = mrmf_solve(problem)
    assert report.converged
    assert report.objective_value == pytest.approx(
        report.mahalanobis_value + report.penalty_value)
    assert all(s.min_eigenvalue() > 0 for s in report.estimates)


def test_unpenalized_solution_maximizes_tangent_likelihood(rng):
    structure = FidelityStructure.running_example()
    truth = (random_spd(2, rng), random_spd(2, rng))
    gamma = block_coupled_gamma(2, structure, scale=0.05, correlation=0.7)
    data = WrappedGaussian((truth[0], truth[1], truth[1]), gamma).sample(rng, 1)[0]
    problem = MrmfProblem(structure=structure, data=data, gamma_inv=_inverse(gamma),
                          lambdas=(0.0, 0.0),
                          settings=MrmfSettings(tol=1e-9, max_iter=20000, gradient="analytic"))
    report = mrmf_solve(problem)

    def nll(means):
        return tangent_log_likelihood(data, [means[f] for f in structure.slot_fidelity], gamma)

    best = nll(report.estimates)
    assert best <= nll(truth) + 1e-7
    for _ in range(5):
        target = (random_spd(2, rng), random_spd(2, rng))
        nearby = [geodesic(a, b, 0.05) for a, b in zip(report.estimates, target)]
        assert best <= nll(nearby) + 1e-7


def test_unconverged_solve_is_flagged(rng):
    problem = _running_problem(rng, settings=MrmfSettings(max_iter=1, gradient="analytic"))
    report = mrmf_solve(problem)
    assert not report.converged
    assert report.iterations <= 1


def test_precondition_identity_data_is_noop(rng):
    structure = FidelityStructure.coupled_pair()
    problem = MrmfProblem(structure=structure, data=(SpdMatrix.identity(2),) * 2,
                          gamma_inv=TangentOperator.identity(2, 2), lambdas=(0.0, 0.0))
    transformed, _ = precondition(problem)
    assert transformed is problem


def test_precondition_preserves_solution(rng):
    problem = _running_problem(rng, settings=TIGHT)
    direct = mrmf_solve(problem)
    transformed, back = precondition(problem)
    assert all(np.allclose(s.entries, np.eye(2)) for s in transformed.data)
    restored = back(mrmf_solve(transformed))
    for ours, theirs in zip(restored.estimates, direct.estimates):
        rel = np.linalg.norm(ours.entries - theirs.entries) / np.linalg.norm(theirs.entries)
        assert rel <= 1e-6


def test_precondition_returns_fixed_values_unchanged(rng):
    gamma, s_hi, s_lo, s_bar = _coupled_pair(rng)
    problem = mrmf_fixed_low(s_hi, s_lo, s_bar, _inverse(gamma), 0.1, TIGHT)
    transformed, back = precondition(problem)
    restored = back(mrmf_solve(transformed))
    assert restored.estimates[1] is s_bar
    direct = mrmf_solve(problem)
    assert np.allclose(restored.sigma_hi.entries, direct.sigma_hi.entries, rtol=1e-6)


# ----------------------------------------------------------------------
# Подбор λ
# ----------------------------------------------------------------------

def test_select_lambda_closest_smaller_on_tie():
    table = {0.1: 4.0, 1.0: 8.0, 10.0: float("nan")}
    assert select_lambda(table, 6.0) == 0.1
    assert select_lambda(table, 7.5) == 1.0
    with pytest.raises(MrmfError):
        select_lambda({1.0: float("nan")}, 6.0)


def test_tune_lambda_singleton_grid_skips_solves():
    def factory(lam, rng):
        raise AssertionError("не должна вызываться")
    assert tune_lambda(factory, [0.5], trials=4, seed=1) == 0.5
    with pytest.raises(ConfigError):
        tune_lambda(factory, [], trials=4, seed=1)


def _factory(s_hi_sigma, s_lo_sigma, gamma):
    model = WrappedGaussian((s_hi_sigma, s_lo_sigma), gamma)
    gamma_inv = _inverse(gamma)

    def make_problem(lam, rng):
        s_hi, s_lo = model.sample(rng, 1)[0]
        return mrmf_fixed_low(s_hi, s_lo, s_lo_sigma, gamma_inv, lam, ANALYTIC)
    return make_problem


def test_lambda_sweep_deterministic_and_monotone(rng):
    structure = FidelityStructure.coupled_pair()
    gamma = block_coupled_gamma(2, structure, scale=0.01, correlation=0.8)
    factory = _factory(random_spd(2, rng), random_spd(2, rng), gamma)
    grid = [0.0, 1.0, 100.0]
    serial = lambda_sweep(factory, grid, trials=8, seed=7, stream_key=(0,))
    with ThreadPoolExecutor(max_workers=3) as pool:
        parallel = lambda_sweep(factory, grid, trials=8, seed=7, executor=pool, stream_key=(0,))
    assert serial == parallel
    assert serial[0.0] <= serial[1.0] <= serial[100.0]
    chosen = tune_lambda(factory, grid, trials=8, seed=7, stream_key=(0,))
    assert chosen == select_lambda(serial, float(tangent_size(2)))
