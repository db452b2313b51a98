"""
Эксперимент на связанной гауссовой модели.

Σ_hi из уишартовского ансамбля, X_lo = X_hi + ε. Для каждого бюджета
сравниваются оценщики только высокой точности, только низкой точности,
EMF, LEMF и MRMF при равной стоимости.
"""

import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from coupled_models import (
    BudgetAllocation, CoupledScms, GaussianCoupledModel, allocation_from_fraction,
    draw_coupled_scms, draw_single_fidelity_scm, wishart_covariance,
)
from errors import MrmfError
from estimators import (
    MrmfProblem, ScalarGain, definiteness, emf, lemf, mrmf_fixed_low, mrmf_solve,
    scalar_gain_from_pilot, tune_lambda,
)
from experiments.config import ExperimentConfig
from experiments.report import TrialRecord
from experiments.runner import Experiment, StoredPilot, TaskResult, TrialTask
from manifold_stats import (
    FidelityStructure, PilotEnsemble, estimate_covariance_operator, pooled_fidelity_means,
)
from random_streams import Purpose, substream
from spd_core import SpdMatrix, intrinsic_distance
from tangent_algebra import TangentOperator, regularized_inverse, tangent_size

logger = logging.getLogger(__name__)

# Индексы дополнительных потоков испытания
HF_STREAM = 1
LF_STREAM = 2


def make_allocation(config: ExperimentConfig, budget_index: int) -> BudgetAllocation:
    """Распределение бюджета: явные (M1, M2) или по доле ρ."""
    budget = config.budgets[budget_index]
    alloc = config.allocation
    counts = config.allocation_counts()[budget_index]
    if counts is not None:
        return BudgetAllocation(alloc.c_hi, alloc.c_lo, budget, counts[0], counts[1])
    return allocation_from_fraction(budget, alloc.c_hi, alloc.c_lo, alloc.fraction)


@dataclass(frozen=True, eq=False)
class PilotArtifact:
    """Пилотные средние точностей, Γ̂ и Γ̂⁻¹ одной структуры."""
    structure: FidelityStructure
    means: Tuple[SpdMatrix, ...]
    gamma: TangentOperator
    gamma_inv: TangentOperator

    @classmethod
    def from_stored(cls, structure: FidelityStructure, means: Sequence[SpdMatrix],
                    gamma: TangentOperator) -> "PilotArtifact":
        """Восстановить из хранилища; Γ̂⁻¹ пересчитывается по сохранённому Γ̂."""
        gamma = gamma.attach_structure(structure)
        return cls(structure, tuple(means), gamma, regularized_inverse(gamma))


def estimate_gamma_inverse(draws: List[Tuple[SpdMatrix, ...]],
                           structure: FidelityStructure) -> PilotArtifact:
    """Γ̂⁻¹ по пилотным реализациям стека с подстановочными средними."""
    pilot = PilotEnsemble(structure, tuple(draws))
    means = pooled_fidelity_means(pilot)
    gamma = estimate_covariance_operator(pilot, means)
    return PilotArtifact(structure, tuple(means), gamma, regularized_inverse(gamma))


@dataclass
class BudgetState:
    """Пилотные оценки для одного бюджета."""
    allocation: BudgetAllocation
    gamma_inv_pair: Optional[TangentOperator] = None    # Слоты (S_hi, S_lo)
    gamma_inv_full: Optional[TangentOperator] = None    # Слоты (S_hi, S¹_lo, S²_lo)
    emf_gain: Optional[ScalarGain] = None
    lemf_gain: Optional[ScalarGain] = None
    mrmf_lambda: float = 0.0


def squared_errors(estimate: np.ndarray, truth: SpdMatrix) -> Tuple[float, float, float]:
    """(‖Σ̂ − Σ‖²_F, d²(Σ̂, Σ) или +∞, λ_min(Σ̂))."""
    diff = estimate - truth.entries
    min_eig, is_spd = definiteness(estimate)
    intrinsic = intrinsic_distance(truth, SpdMatrix(estimate)) ** 2 if is_spd else math.inf
    return float(np.sum(diff * diff)), intrinsic, min_eig


class SimpleGaussianExperiment(Experiment):
    """Сравнение оценщиков на связанной гауссовой модели."""
    estimator_order = ("hf", "lf", "emf", "lemf", "mrmf", "mrmf_full")

    def __init__(self, config: ExperimentConfig):
        super().__init__(config)
        self.settings = config.settings
        rng = substream(config.seed, Purpose.PROBLEM)
        self.model = GaussianCoupledModel(wishart_covariance(config.dim, rng), config.noise_var)
        self.states: List[BudgetState] = []
        self.active = [name for name in self.estimator_order if name in config.estimators]

    # ------------------------------------------------------------------
    # Пилот
    # ------------------------------------------------------------------

    def _pilot_budget(self, budget_index: int) -> BudgetState:
        config = self.config
        allocation = make_allocation(config, budget_index)
        state = BudgetState(allocation)
        full = "mrmf_full" in self.active and allocation.m2 > config.dim
        pairs, triples, hi, lo, bar = [], [], [], [], []
        skipped = 0
        for p in range(config.pilot_count):
            scms = draw_coupled_scms(self.model, allocation,
                                     substream(config.seed, Purpose.PILOT, budget_index, p))
            if not (scms.s_hi.is_spd and scms.s_lo.is_spd and scms.s_bar_lo.is_spd):
                skipped += 1
                continue
            pair = (scms.s_hi.as_spd(), scms.s_lo.as_spd())
            pairs.append(pair)
            hi.append(pair[0])
            lo.append(pair[1])
            bar.append(scms.s_bar_lo.as_spd())
            if full and scms.s_lo_extra is not None and scms.s_lo_extra.is_spd:
                triples.append(pair + (scms.s_lo_extra.as_spd(),))
        if skipped:
            logger.warning(f"Бюджет {allocation.budget}: пропущено {skipped} вырожденных пилотов")
        if len(pairs) < 2:
            raise MrmfError(f"Бюджет {allocation.budget}: недостаточно невырожденных пилотов")

        if "mrmf" in self.active or "mrmf_full" in self.active:
            artifact = estimate_gamma_inverse(pairs, FidelityStructure.coupled_pair())
            state.gamma_inv_pair = artifact.gamma_inv
            self.pilot_artifacts[f"budget_{budget_index}_pair"] = artifact
        if full and len(triples) >= 2:
            artifact = estimate_gamma_inverse(triples, FidelityStructure.running_example())
            state.gamma_inv_full = artifact.gamma_inv
            self.pilot_artifacts[f"budget_{budget_index}_full"] = artifact
        if "emf" in self.active:
            state.emf_gain = scalar_gain_from_pilot(hi, lo, bar)
            self.pilot_gains[f"budget_{budget_index}_emf"] = state.emf_gain.alpha
        if "lemf" in self.active:
            state.lemf_gain = scalar_gain_from_pilot(hi, lo, bar, log_euclidean=True)
            self.pilot_gains[f"budget_{budget_index}_lemf"] = state.lemf_gain.alpha
        logger.info(f"Бюджет {allocation.budget}: M1 = {allocation.m1}, M2 = {allocation.m2}, "
                    f"пилотов {len(pairs)}")
        return state

    def pilot(self):
        self.pilot_artifacts, self.pilot_gains = {}, {}
        self.states = [self._pilot_budget(b) for b in range(len(self.config.budgets))]

    def _restore_budget(self, budget_index: int) -> BudgetState:
        state = BudgetState(make_allocation(self.config, budget_index))
        prefix = f"budget_{budget_index}"
        if "mrmf" in self.active or "mrmf_full" in self.active:
            state.gamma_inv_pair = self.pilot_artifacts[f"{prefix}_pair"].gamma_inv
        full = self.pilot_artifacts.get(f"{prefix}_full")
        if full is not None:
            state.gamma_inv_full = full.gamma_inv
        if "emf" in self.active:
            state.emf_gain = ScalarGain(self.pilot_gains[f"{prefix}_emf"])
        if "lemf" in self.active:
            state.lemf_gain = ScalarGain(self.pilot_gains[f"{prefix}_lemf"])
        return state

    def restore_pilot(self, stored: Mapping[str, StoredPilot], gains: Mapping[str, float]):
        self.pilot_artifacts = {key: PilotArtifact.from_stored(*value) for key, value in stored.items()}
        self.pilot_gains = dict(gains)
        self.states = [self._restore_budget(b) for b in range(len(self.config.budgets))]

    # ------------------------------------------------------------------
    # Подбор λ
    # ------------------------------------------------------------------

    def problem_factory(self, state: BudgetState) -> Callable[[float, np.random.Generator], MrmfProblem]:
        def make_problem(lam: float, rng: np.random.Generator) -> MrmfProblem:
            scms = draw_coupled_scms(self.model, state.allocation, rng)
            return mrmf_fixed_low(scms.s_hi.as_spd(), scms.s_lo.as_spd(), scms.s_bar_lo.as_spd(),
                                  state.gamma_inv_pair, lam, self.settings)
        return make_problem

    def tune(self, executor: Optional[ThreadPoolExecutor]):
        if "mrmf" not in self.active and "mrmf_full" not in self.active:
            return
        target = float(tangent_size(self.config.dim))
        for b, state in enumerate(self.states):
            if state.gamma_inv_pair is None:
                state.mrmf_lambda = self.config.lambda_grid[0]
                continue
            state.mrmf_lambda = tune_lambda(
                self.problem_factory(state), self.config.lambda_grid, self.config.tune_trials,
                self.config.seed, target=target, executor=executor, stream_key=(b,),
            )
            self.selected_lambdas[repr(float(state.allocation.budget))] = state.mrmf_lambda

    # ------------------------------------------------------------------
    # Испытания
    # ------------------------------------------------------------------

    def _estimate(self, name: str, state: BudgetState, scms: CoupledScms,
                  task: TrialTask) -> Tuple[Optional[np.ndarray], Optional[float]]:
        """Оценка Σ_hi оценщиком name и значение Махаланобиса (для MRMF)."""
        seed = self.config.seed
        if name == "hf":
            rng = substream(seed, Purpose.EVALUATE, task.budget_index, task.trial, HF_STREAM)
            return draw_single_fidelity_scm(self.model, state.allocation.hf_only_count, 0,
                                            rng).matrix, None
        if name == "lf":
            rng = substream(seed, Purpose.EVALUATE, task.budget_index, task.trial, LF_STREAM)
            return draw_single_fidelity_scm(self.model, state.allocation.lf_only_count, 1,
                                            rng).matrix, None
        if name == "emf":
            return emf(scms.s_hi, scms.s_lo, scms.s_bar_lo, state.emf_gain).matrix, None
        if name == "lemf":
            return lemf(scms.s_hi, scms.s_lo, scms.s_bar_lo, state.lemf_gain).entries, None
        if name == "mrmf":
            problem = mrmf_fixed_low(scms.s_hi.as_spd(), scms.s_lo.as_spd(),
                                     scms.s_bar_lo.as_spd(), state.gamma_inv_pair,
                                     state.mrmf_lambda, self.settings)
            report = mrmf_solve(problem)
            return report.sigma_hi.entries, report.mahalanobis_value
        if name == "mrmf_full":
            if state.gamma_inv_full is None or scms.s_lo_extra is None:
                return None, None
            problem = MrmfProblem(
                structure=FidelityStructure.running_example(),
                data=(scms.s_hi.as_spd(), scms.s_lo.as_spd(), scms.s_lo_extra.as_spd()),
                gamma_inv=state.gamma_inv_full,
                lambdas=(state.mrmf_lambda, state.mrmf_lambda),
                settings=self.settings,
            )
            report = mrmf_solve(problem)
            return report.sigma_hi.entries, report.mahalanobis_value
        raise MrmfError(f"Неизвестный оценщик {name}")

    def run_task(self, task: TrialTask) -> TaskResult:
        state = self.states[task.budget_index]
        budget = state.allocation.budget
        scms = draw_coupled_scms(
            self.model, state.allocation,
            substream(self.config.seed, Purpose.EVALUATE, task.budget_index, task.trial),
        )
        result = TaskResult()
        for name in self.active:
            start = time.perf_counter()
            try:
                estimate, mahalanobis = self._estimate(name, state, scms, task)
            except MrmfError as e:
                logger.warning(f"{name}, бюджет {budget}, испытание {task.trial}: {e}")
                result.records.extend(self.failure_records(task, [name]))
                continue
            if estimate is None:
                continue
            wall = (time.perf_counter() - start) * 1000.0 if self.config.record_wall_time else 0.0
            se_frob, se_intr, min_eig = squared_errors(estimate, self.model.sigma_hi)
            result.records.append(TrialRecord(task.trial, budget, name, se_frob, se_intr,
                                              min_eig, mahalanobis, wall))
        return result
