"""
Набор проверок свойств.

Каждая проверка строит случайные постановки из потока SELFTEST и
сравнивает результат с точным тождеством или статистическим ожиданием.
"""

import logging
import math
import time
from dataclasses import asdict, dataclass
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from coupled_models import (
    BudgetAllocation, GaussianCoupledModel, WrappedGaussian, block_coupled_gamma,
    draw_coupled_scms, optimal_scalar_gain, wishart_covariance,
)
from errors import MrmfError
from estimators import (
    MrmfProblem, MrmfSettings, ScalarGain, control_variate_residual, emf, lemf, mrmf_fixed_low,
    mrmf_gradient, mrmf_solve, precondition, scalar_gain_from_pilot,
)
from experiments.config import PropertySuiteConfig
from manifold_stats import FidelityStructure, mahalanobis_sq, weighted_mahalanobis_sq
from metric_learning import gmml_metric
from random_streams import Purpose, substream
from spd_core import (
    congruence, geodesic, intrinsic_distance, random_spd, riemannian_exp,
    riemannian_log, spd_inverse, spd_sqrt,
)
from tangent_algebra import TangentOperator, tangent_size

logger = logging.getLogger(__name__)

GEOMETRY_TOL = 1e-10
SPEED_TOL = 1e-8
WEIGHTED_TOL = 1e-8
PRECONDITION_TOL = 1e-6
RESIDUAL_TOL = 1e-6
GRADIENT_TOL = 1e-5
TARGET_SIGMAS = 3.0
GAIN_PERTURBATION = 0.2

# Оптимизатор для проверок, где нужна точная стационарная точка
TIGHT_SETTINGS = MrmfSettings(tol=1e-11, max_iter=20000, gradient="analytic")
FAST_SETTINGS = MrmfSettings(gradient="analytic")


@dataclass
class CheckResult:
    """Результат одной проверки."""
    name: str
    passed: bool
    detail: str
    elapsed: float = 0.0

    def to_dict(self) -> Dict:
        return asdict(self)


def _relative(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.linalg.norm(a - b)) / max(1.0, float(np.linalg.norm(b)))


def _inverse_operator(gamma: TangentOperator) -> TangentOperator:
    return TangentOperator(gamma.dim, np.linalg.inv(gamma.matrix), gamma.structure)


def _random_gamma(dim: int, count: int, rng: np.random.Generator,
                  scale: float = 0.05) -> TangentOperator:
    n = count * tangent_size(dim)
    return TangentOperator(dim, scale * random_spd(n, rng).entries)


class PropertySuite:
    """
    Проверки геометрии, оценщиков и обучения метрики.

    Объёмы берутся из PropertySuiteConfig; все потоки выводятся из seed.
    """

    def __init__(self, suite: PropertySuiteConfig, seed: int):
        self.suite = suite
        self.seed = seed
        self.checks: List[Tuple[str, Callable[[int], Tuple[bool, str]]]] = [
            ("geometry_round_trip", self.check_round_trip),
            ("geodesic_endpoints", self.check_geodesic_endpoints),
            ("geodesic_constant_speed", self.check_constant_speed),
            ("affine_invariance", self.check_affine_invariance),
            ("log_congruence", self.check_log_congruence),
            ("weighted_mahalanobis", self.check_weighted_mahalanobis),
            ("precondition_equivalence", self.check_precondition),
            ("control_variate_residual", self.check_control_variate),
            ("mahalanobis_target", self.check_mahalanobis_target),
            ("emf_gain_optimal", self.check_emf_gain),
            ("lemf_gain_optimal", self.check_lemf_gain),
            ("gradient_agreement", self.check_gradient),
            ("gmml_geodesic", self.check_gmml),
        ]

    def _rng(self, check: int, *indices: int) -> np.random.Generator:
        return substream(self.seed, Purpose.SELFTEST, check, *indices)

    def _pairs(self, check: int):
        """Пары (A, B) по всем размерностям; B с обусловленностью до 100."""
        for dim in self.suite.dims:
            for i in range(self.suite.geometry_pairs):
                rng = self._rng(check, dim, i)
                yield dim, random_spd(dim, rng), random_spd(dim, rng, condition=100.0), rng

    # ------------------------------------------------------------------
    # Геометрия
    # ------------------------------------------------------------------

    def check_round_trip(self, check: int) -> Tuple[bool, str]:
        worst = 0.0
        for _, a, b, _ in self._pairs(check):
            back = riemannian_exp(a, riemannian_log(a, b))
            worst = max(worst, _relative(back.entries, b.entries))
        return worst <= GEOMETRY_TOL, f"max отн. ошибка exp∘log = {worst:.2e}"

    def check_geodesic_endpoints(self, check: int) -> Tuple[bool, str]:
        worst = 0.0
        for _, a, b, _ in self._pairs(check):
            worst = max(worst, _relative(geodesic(a, b, 0.0).entries, a.entries),
                        _relative(geodesic(a, b, 1.0).entries, b.entries))
        return worst <= 1e-12, f"max отклонение концов = {worst:.2e}"

    def check_constant_speed(self, check: int) -> Tuple[bool, str]:
        worst = 0.0
        for _, a, b, _ in self._pairs(check):
            total = intrinsic_distance(a, b)
            for t in (0.25, 0.5, 0.75):
                gap = abs(intrinsic_distance(a, geodesic(a, b, t)) - t * total)
                worst = max(worst, gap / max(1.0, total))
        return worst <= SPEED_TOL, f"max отклонение d(A, γ(t)) − t·d(A, B) = {worst:.2e}"

    def check_affine_invariance(self, check: int) -> Tuple[bool, str]:
        worst = 0.0
        for dim, a, b, rng in self._pairs(check):
            y = random_spd(dim, rng)
            moved = intrinsic_distance(congruence(y, a), congruence(y, b))
            original = intrinsic_distance(a, b)
            worst = max(worst, abs(moved - original) / max(1.0, original))
        return worst <= GEOMETRY_TOL, f"max изменение расстояния = {worst:.2e}"

    def check_log_congruence(self, check: int) -> Tuple[bool, str]:
        worst = 0.0
        for dim, a, b, rng in self._pairs(check):
            y = random_spd(dim, rng)
            lhs = riemannian_log(congruence(y, a), congruence(y, b))
            rhs = congruence(y, riemannian_log(a, b))
            worst = max(worst, _relative(lhs.entries, rhs.entries))
        return worst <= GEOMETRY_TOL, f"max отн. ошибка = {worst:.2e}"

    # ------------------------------------------------------------------
    # Махаланобис и MRMF
    # ------------------------------------------------------------------

    def check_weighted_mahalanobis(self, check: int) -> Tuple[bool, str]:
        worst = 0.0
        for dim in self.suite.dims:
            for i in range(self.suite.weighted_instances):
                rng = self._rng(check, dim, i)
                sigma = [random_spd(dim, rng) for _ in range(3)]
                gamma = _random_gamma(dim, 3, rng)
                data = WrappedGaussian(tuple(sigma), gamma).sample(rng, 1)[0]
                plain = mahalanobis_sq(data, sigma, _inverse_operator(gamma))
                weighted = weighted_mahalanobis_sq(data, sigma, gamma)
                worst = max(worst, abs(plain - weighted) / max(1.0, plain))
        return worst <= WEIGHTED_TOL, f"max отн. расхождение = {worst:.2e}"

    def _running_problem(self, dim: int, rng: np.random.Generator,
                         settings: MrmfSettings) -> MrmfProblem:
        structure = FidelityStructure.running_example()
        sigma_hi, sigma_lo = random_spd(dim, rng), random_spd(dim, rng)
        gamma = block_coupled_gamma(dim, structure, scale=0.05, correlation=0.7)
        data = WrappedGaussian((sigma_hi, sigma_lo, sigma_lo), gamma).sample(rng, 1)[0]
        return MrmfProblem(structure=structure, data=data, gamma_inv=_inverse_operator(gamma),
                           lambdas=(0.1, 0.1), settings=settings)

    def check_precondition(self, check: int) -> Tuple[bool, str]:
        worst = 0.0
        for dim in self.suite.dims[:3]:
            for i in range(self.suite.precondition_instances):
                problem = self._running_problem(dim, self._rng(check, dim, i), TIGHT_SETTINGS)
                direct = mrmf_solve(problem)
                transformed, back = precondition(problem)
                restored = back(mrmf_solve(transformed))
                for ours, theirs in zip(restored.estimates, direct.estimates):
                    worst = max(worst, _relative(ours.entries, theirs.entries))
        return worst <= PRECONDITION_TOL, f"max отн. расхождение решений = {worst:.2e}"

    def check_control_variate(self, check: int) -> Tuple[bool, str]:
        worst = 0.0
        structure = FidelityStructure.coupled_pair()
        for dim in self.suite.dims[:3]:
            for i in range(self.suite.residual_instances):
                rng = self._rng(check, dim, i)
                sigma_hi, sigma_lo = random_spd(dim, rng), random_spd(dim, rng)
                gamma = TangentOperator(dim, _random_gamma(dim, 2, rng).matrix, structure)
                model = WrappedGaussian((sigma_hi, sigma_lo), gamma)
                s_hi, s_lo = model.sample(rng, 1)[0]
                s_bar_lo = model.sample(rng, 1)[0][1]
                report = mrmf_solve(mrmf_fixed_low(s_hi, s_lo, s_bar_lo,
                                                   _inverse_operator(gamma), 0.0, TIGHT_SETTINGS))
                residual, scale = control_variate_residual(report.sigma_hi, s_hi, s_lo,
                                                           s_bar_lo, gamma)
                worst = max(worst, residual / scale)
        return worst <= RESIDUAL_TOL, f"max отн. невязка = {worst:.2e}"

    def check_mahalanobis_target(self, check: int) -> Tuple[bool, str]:
        details, passed = [], True
        structure = FidelityStructure.coupled_pair()
        for dim in self.suite.target_dims:
            setup = self._rng(check, dim)
            sigma_hi, sigma_lo = random_spd(dim, setup), random_spd(dim, setup)
            gamma = block_coupled_gamma(dim, structure, scale=0.01, correlation=0.8)
            gamma_inv = _inverse_operator(gamma)
            model = WrappedGaussian((sigma_hi, sigma_lo), gamma)
            values = []
            for t in range(self.suite.target_trials):
                s_hi, s_lo = model.sample(self._rng(check, dim, t + 1), 1)[0]
                report = mrmf_solve(mrmf_fixed_low(s_hi, s_lo, sigma_lo, gamma_inv, 0.0,
                                                   FAST_SETTINGS))
                if report.converged:
                    values.append(report.mahalanobis_value)
            if len(values) < 2:
                return False, f"d = {dim}: решения не сошлись"
            target = tangent_size(dim)
            mean = float(np.mean(values))
            se = float(np.std(values, ddof=1)) / math.sqrt(len(values))
            ok = abs(mean - target) <= TARGET_SIGMAS * se
            passed = passed and ok
            details.append(f"d = {dim}: среднее {mean:.3f}, цель {target}, SE {se:.3f}")
        return passed, "; ".join(details)

    # ------------------------------------------------------------------
    # Скалярные коэффициенты EMF / LEMF
    # ------------------------------------------------------------------

    def _gain_model(self, check: int) -> Tuple[GaussianCoupledModel, BudgetAllocation]:
        dim = self.suite.dims[min(1, len(self.suite.dims) - 1)]
        model = GaussianCoupledModel(wishart_covariance(dim, self._rng(check)), 0.1)
        # Только связанные пары: S̄_lo задаётся отдельно
        return model, BudgetAllocation(1.0, 0.01, 11.0, 10, 0)

    @staticmethod
    def _optimal_among(errors: Dict[float, float]) -> bool:
        best = errors[1.0]
        return all(best <= value for value in errors.values())

    def check_emf_gain(self, check: int) -> Tuple[bool, str]:
        model, allocation = self._gain_model(check)
        alpha = optimal_scalar_gain(model)
        factors = (1.0 - GAIN_PERTURBATION, 1.0, 1.0 + GAIN_PERTURBATION)
        errors = {f: 0.0 for f in factors}
        truth = model.sigma_hi.entries
        for t in range(self.suite.gain_trials):
            scms = draw_coupled_scms(model, allocation, self._rng(check, t + 1))
            for f in factors:
                estimate = emf(scms.s_hi, scms.s_lo, model.sigma_lo, ScalarGain(f * alpha))
                diff = estimate.matrix - truth
                errors[f] += float(np.sum(diff * diff))
        detail = ", ".join(f"MSE({f:g}α*) = {v / self.suite.gain_trials:.4g}"
                           for f, v in errors.items())
        return self._optimal_among(errors), f"α* = {alpha:.4f}: {detail}"

    def check_lemf_gain(self, check: int) -> Tuple[bool, str]:
        model, allocation = self._gain_model(check)

        def draw(index: int):
            scms = draw_coupled_scms(model, allocation, self._rng(check, index))
            ref = draw_coupled_scms(model, allocation, self._rng(check, index, 1))
            return scms.s_hi.as_spd(), scms.s_lo.as_spd(), ref.s_lo.as_spd()

        trials = self.suite.gain_trials
        pilot = [draw(t + 1) for t in range(trials)]
        gain = scalar_gain_from_pilot([p[0] for p in pilot], [p[1] for p in pilot],
                                      [p[2] for p in pilot], log_euclidean=True)
        factors = (1.0 - GAIN_PERTURBATION, 1.0, 1.0 + GAIN_PERTURBATION)
        logs = {f: [] for f in factors}
        for t in range(trials):
            s_hi, s_lo, s_bar = draw(trials + t + 1)
            for f in factors:
                logs[f].append(lemf(s_hi, s_lo, s_bar, ScalarGain(f * gain.alpha)).log)
        # Все варианты несмещены относительно E log S_hi: сравниваются разбросы
        errors = {}
        for f, values in logs.items():
            arr = np.stack(values)
            errors[f] = float(np.sum(arr.var(axis=0, ddof=1)))
        detail = ", ".join(f"Var({f:g}α) = {v:.4g}" for f, v in errors.items())
        return self._optimal_among(errors), f"α = {gain.alpha:.4f}: {detail}"

    # ------------------------------------------------------------------
    # Градиент и GMML
    # ------------------------------------------------------------------

    def check_gradient(self, check: int) -> Tuple[bool, str]:
        worst = 0.0
        for dim in self.suite.dims[:3]:
            for i in range(self.suite.gradient_points):
                rng = self._rng(check, dim, i)
                problem = self._running_problem(dim, rng, FAST_SETTINGS)
                roots = [spd_sqrt(random_spd(dim, rng)) for _ in problem.free_fidelities]
                analytic = mrmf_gradient(problem, roots, "analytic").to_flat()
                numeric = mrmf_gradient(problem, roots, "finite_difference").to_flat()
                worst = max(worst, _relative(analytic, numeric))
        return worst <= GRADIENT_TOL, f"max отн. расхождение = {worst:.2e}"

    def check_gmml(self, check: int) -> Tuple[bool, str]:
        worst = 0.0
        for dim in self.suite.dims:
            for i in range(self.suite.gmml_pairs):
                rng = self._rng(check, dim, i)
                t_mat, d_mat = random_spd(dim, rng), random_spd(dim, rng)
                t_inv = spd_inverse(t_mat)
                worst = max(
                    worst,
                    _relative(gmml_metric(t_mat, d_mat, 0.0).matrix.entries, t_inv.entries),
                    _relative(gmml_metric(t_mat, d_mat, 1.0).matrix.entries, d_mat.entries),
                    _relative(gmml_metric(t_mat, d_mat, 0.1).matrix.entries,
                              geodesic(t_inv, d_mat, 0.1).entries),
                )
        return worst <= GEOMETRY_TOL, f"max отн. ошибка = {worst:.2e}"

    # ------------------------------------------------------------------

    def run(self, only: Optional[List[str]] = None) -> List[CheckResult]:
        """
        Выполнить проверки.

        Args:
            only: Имена проверок (None: все)

        Returns:
            Результаты в порядке объявления
        """
        results = []
        for index, (name, check) in enumerate(self.checks):
            if only is not None and name not in only:
                continue
            start = time.perf_counter()
            try:
                passed, detail = check(index)
            except MrmfError as e:
                passed, detail = False, f"ошибка: {e}"
            elapsed = time.perf_counter() - start
            result = CheckResult(name, bool(passed), detail, elapsed)
            if result.passed:
                logger.info(f"[OK]   {name}: {detail} ({elapsed:.1f} с)")
            else:
                logger.error(f"[FAIL] {name}: {detail}")
            results.append(result)
        return results


def run_property_suite(suite: PropertySuiteConfig, seed: int,
                       only: Optional[List[str]] = None) -> List[CheckResult]:
    return PropertySuite(suite, seed).run(only)
