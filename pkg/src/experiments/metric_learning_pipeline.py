"""
Обучение метрики GMML по многоточностным оценкам ковариаций классов.

Эталонная метрика строится по большому числу выборок высокой точности;
оценщики сравниваются по квадратичным ошибкам матрицы метрики и по MRE
на фиксированном наборе тестовых точек из смеси.
"""

import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, Optional, Tuple

import numpy as np

from coupled_models import BudgetAllocation, CoupledScms, TwoClassMixture, make_two_class_mixture
from errors import IndefiniteInputError, MrmfError
from estimators import (
    MrmfProblem, ScalarGain, emf, lemf, mrmf_fixed_low, mrmf_solve, scalar_gain_from_pilot, scm,
    tune_lambda,
)
from experiments.config import ExperimentConfig
from experiments.report import MreRecord, TrialRecord
from experiments.runner import Experiment, StoredPilot, TaskResult, TrialTask
from experiments.simple_gaussian import (
    HF_STREAM, LF_STREAM, PilotArtifact, estimate_gamma_inverse, make_allocation,
)
from manifold_stats import FidelityStructure
from metric_learning import (
    MetricMatrix, bifidelity_mean, estimate_metric, mean_relative_error, metric_errors,
)
from random_streams import Purpose, substream
from spd_core import MatrixLike
from tangent_algebra import TangentOperator, tangent_size

logger = logging.getLogger(__name__)

CLASSES = (0, 1)


@dataclass
class ClassDraw:
    """Связанные выборки одного класса и их SCM."""
    scms: CoupledScms
    mean: np.ndarray        # Двухуровневая оценка среднего


def draw_class(mixture: TwoClassMixture, label: int, allocation: BudgetAllocation,
               rng: np.random.Generator) -> ClassDraw:
    """M1 связанных пар и M2 дополнительных y_lo класса label."""
    y_hi, y_lo = mixture.sample_class(label, allocation.m1, rng)
    extra = mixture.sample_low(label, allocation.m2, rng)
    y_lo_all = np.concatenate([y_lo, extra])
    scms = CoupledScms(
        s_hi=scm(y_hi),
        s_lo=scm(y_lo),
        s_lo_extra=scm(extra) if allocation.m2 >= 2 else None,
        s_bar_lo=scm(y_lo_all),
        allocation=allocation,
    )
    return ClassDraw(scms, bifidelity_mean(y_hi, y_lo, y_lo_all))


@dataclass
class ClassState:
    gamma_inv: Optional[TangentOperator] = None
    emf_gain: Optional[ScalarGain] = None
    lemf_gain: Optional[ScalarGain] = None


@dataclass
class MetricBudgetState:
    allocation: BudgetAllocation
    classes: Dict[int, ClassState] = field(default_factory=dict)
    mrmf_lambda: float = 0.0


class MetricLearningExperiment(Experiment):
    """Сравнение оценщиков по качеству метрики GMML."""
    estimator_order = ("hf", "lf", "emf", "lemf", "mrmf")

    def __init__(self, config: ExperimentConfig):
        super().__init__(config)
        self.settings = config.settings
        mix = config.mixture
        self.mixture = make_two_class_mixture(
            config.dim, mix.separation, rng=substream(config.seed, Purpose.PROBLEM),
            noise_var=mix.noise_var, bias=mix.bias,
        )
        self.active = [name for name in self.estimator_order if name in config.estimators]
        if "mrmf_full" in config.estimators:
            logger.warning("mrmf_full не используется в обучении метрики")
        self.reference: Optional[MetricMatrix] = None
        self.test_points: Optional[np.ndarray] = None
        self.states: List[MetricBudgetState] = []

    # ------------------------------------------------------------------
    # Пилот
    # ------------------------------------------------------------------

    def _reference_metric(self) -> MetricMatrix:
        covs, means = [], []
        for label in CLASSES:
            rng = substream(self.config.seed, Purpose.REFERENCE, label)
            y = self.mixture.sample_class(label, self.config.mixture.reference_samples, rng)[0]
            covs.append(scm(y))
            means.append(y.mean(axis=0))
        return estimate_metric(covs[0], covs[1], means[0], means[1], self.config.mixture.t,
                               provenance="reference")

    def _pilot_class(self, budget_index: int, label: int,
                     allocation: BudgetAllocation) -> ClassState:
        """Γ̂⁻¹ и коэффициенты управляющих переменных одного класса."""
        pairs, hi, lo, bar = [], [], [], []
        for p in range(self.config.pilot_count):
            rng = substream(self.config.seed, Purpose.PILOT, budget_index, label, p)
            scms = draw_class(self.mixture, label, allocation, rng).scms
            if not (scms.s_hi.is_spd and scms.s_lo.is_spd and scms.s_bar_lo.is_spd):
                continue
            pairs.append((scms.s_hi.as_spd(), scms.s_lo.as_spd()))
            hi.append(pairs[-1][0])
            lo.append(pairs[-1][1])
            bar.append(scms.s_bar_lo.as_spd())
        if len(pairs) < 2:
            raise MrmfError(f"Класс {label}: недостаточно невырожденных пилотов")
        state = ClassState()
        key = f"budget_{budget_index}_class_{label}"
        if "mrmf" in self.active:
            artifact = estimate_gamma_inverse(pairs, FidelityStructure.coupled_pair())
            state.gamma_inv = artifact.gamma_inv
            self.pilot_artifacts[key] = artifact
        if "emf" in self.active:
            state.emf_gain = scalar_gain_from_pilot(hi, lo, bar)
            self.pilot_gains[f"{key}_emf"] = state.emf_gain.alpha
        if "lemf" in self.active:
            state.lemf_gain = scalar_gain_from_pilot(hi, lo, bar, log_euclidean=True)
            self.pilot_gains[f"{key}_lemf"] = state.lemf_gain.alpha
        return state

    def _restore_class(self, budget_index: int, label: int) -> ClassState:
        state = ClassState()
        key = f"budget_{budget_index}_class_{label}"
        if "mrmf" in self.active:
            state.gamma_inv = self.pilot_artifacts[key].gamma_inv
        if "emf" in self.active:
            state.emf_gain = ScalarGain(self.pilot_gains[f"{key}_emf"])
        if "lemf" in self.active:
            state.lemf_gain = ScalarGain(self.pilot_gains[f"{key}_lemf"])
        return state

    def _prepare_evaluation(self):
        """Эталонная метрика и тестовые точки; зависят только от зерна."""
        self.reference = self._reference_metric()
        self.test_points = self.mixture.sample(
            self.config.mixture.test_points, substream(self.config.seed, Purpose.TEST_POINTS)
        )[0]

    def _build_states(self, make_class: Callable[[int, int, BudgetAllocation], ClassState]):
        self.states = []
        for b in range(len(self.config.budgets)):
            allocation = make_allocation(self.config, b)
            state = MetricBudgetState(allocation)
            for label in CLASSES:
                state.classes[label] = make_class(b, label, allocation)
            self.states.append(state)
            logger.info(f"Бюджет на класс {allocation.budget}: M1 = {allocation.m1}, "
                        f"M2 = {allocation.m2}")

    def pilot(self):
        self.pilot_artifacts, self.pilot_gains = {}, {}
        self._prepare_evaluation()
        self._build_states(self._pilot_class)

    def restore_pilot(self, stored: Mapping[str, StoredPilot], gains: Mapping[str, float]):
        self.pilot_artifacts = {key: PilotArtifact.from_stored(*value) for key, value in stored.items()}
        self.pilot_gains = dict(gains)
        self._build_states(lambda b, label, allocation: self._restore_class(b, label))
        self._prepare_evaluation()

    # ------------------------------------------------------------------
    # Подбор λ
    # ------------------------------------------------------------------

    def tune(self, executor: Optional[ThreadPoolExecutor]):
        if "mrmf" not in self.active:
            return
        target = float(tangent_size(self.config.dim))
        for b, state in enumerate(self.states):
            gamma_inv = state.classes[0].gamma_inv

            def make_problem(lam: float, rng: np.random.Generator,
                             state=state, gamma_inv=gamma_inv) -> MrmfProblem:
                scms = draw_class(self.mixture, 0, state.allocation, rng).scms
                return mrmf_fixed_low(scms.s_hi.as_spd(), scms.s_lo.as_spd(),
                                      scms.s_bar_lo.as_spd(), gamma_inv, lam, self.settings)

            state.mrmf_lambda = tune_lambda(
                make_problem, self.config.lambda_grid, self.config.tune_trials,
                self.config.seed, target=target, executor=executor, stream_key=(b,),
            )
            self.selected_lambdas[repr(float(state.allocation.budget))] = state.mrmf_lambda

    # ------------------------------------------------------------------
    # Испытания
    # ------------------------------------------------------------------

    def _class_estimate(self, name: str, state: MetricBudgetState, label: int,
                        draw: ClassDraw, task: TrialTask) -> Tuple[MatrixLike, np.ndarray, Optional[float]]:
        seed = self.config.seed
        class_state = state.classes[label]
        scms = draw.scms
        if name == "hf":
            rng = substream(seed, Purpose.EVALUATE, task.budget_index, task.trial, label, HF_STREAM)
            y = self.mixture.sample_class(label, state.allocation.hf_only_count, rng)[0]
            return scm(y), y.mean(axis=0), None
        if name == "lf":
            rng = substream(seed, Purpose.EVALUATE, task.budget_index, task.trial, label, LF_STREAM)
            y = self.mixture.sample_low(label, state.allocation.lf_only_count, rng)
            return scm(y), y.mean(axis=0), None
        if name == "emf":
            return emf(scms.s_hi, scms.s_lo, scms.s_bar_lo, class_state.emf_gain), draw.mean, None
        if name == "lemf":
            return lemf(scms.s_hi, scms.s_lo, scms.s_bar_lo, class_state.lemf_gain), draw.mean, None
        if name == "mrmf":
            report = mrmf_solve(mrmf_fixed_low(
                scms.s_hi.as_spd(), scms.s_lo.as_spd(), scms.s_bar_lo.as_spd(),
                class_state.gamma_inv, state.mrmf_lambda, self.settings,
            ))
            return report.sigma_hi, draw.mean, report.mahalanobis_value
        raise MrmfError(f"Неизвестный оценщик {name}")

    def run_task(self, task: TrialTask) -> TaskResult:
        state = self.states[task.budget_index]
        budget = state.allocation.budget
        draws = {
            label: draw_class(self.mixture, label, state.allocation,
                              substream(self.config.seed, Purpose.EVALUATE, task.budget_index,
                                        task.trial, label))
            for label in CLASSES
        }
        result = TaskResult()
        for name in self.active:
            start = time.perf_counter()
            estimates = []
            try:
                for label in CLASSES:
                    estimates.append(self._class_estimate(name, state, label, draws[label], task))
                covs = [e[0] for e in estimates]
                metric = estimate_metric(covs[0], covs[1], estimates[0][1], estimates[1][1],
                                         self.config.mixture.t, provenance=name)
            except IndefiniteInputError as e:
                logger.debug(f"{name}, испытание {task.trial}: {e}")
                min_eig = min((getattr(est[0], "min_eig", math.nan) for est in estimates),
                              default=math.nan)
                result.records.append(TrialRecord(task.trial, budget, name, math.nan,
                                                  math.inf, min_eig))
                continue
            except MrmfError as e:
                logger.warning(f"{name}, бюджет {budget}, испытание {task.trial}: {e}")
                result.records.extend(self.failure_records(task, [name]))
                continue
            wall = (time.perf_counter() - start) * 1000.0 if self.config.record_wall_time else 0.0
            se_frob, se_intr = metric_errors(metric, self.reference)
            mahalanobis = [e[2] for e in estimates if e[2] is not None]
            result.records.append(TrialRecord(
                task.trial, budget, name, se_frob, se_intr, metric.matrix.min_eigenvalue(),
                float(np.mean(mahalanobis)) if mahalanobis else None, wall,
            ))
            result.mre.append(MreRecord(task.trial, budget, name,
                                        mean_relative_error(metric, self.reference, self.test_points)))
        return result
