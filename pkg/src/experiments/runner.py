"""
Исполнитель экспериментов.
Проводит фазы пилот → подбор λ → испытания → отчёт, распределяя
испытания по пулу потоков и сообщая о ходе работы через колбэки.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum, auto
from pathlib import Path
from threading import Event
from typing import Any, Callable, Dict, List, Mapping, Optional, Sequence, Tuple

from errors import MrmfError
from experiments.config import ExperimentConfig, ExperimentKind, PropertySuiteConfig, output_path
from experiments.property_suite import CheckResult, PropertySuite
from experiments.report import (
    MreRecord, TrialRecord, build_manifest, histogram, summarize, write_histogram_csv,
    write_json, write_mre_csv, write_trials_csv,
)
from manifold_stats import FidelityStructure
from operator_store import OperatorStore, StoreConfig
from spd_core import SpdMatrix
from tangent_algebra import TangentOperator

logger = logging.getLogger(__name__)

# Сохранённый пилот одной структуры: (структура, средние точностей, Γ̂)
StoredPilot = Tuple[FidelityStructure, List[SpdMatrix], TangentOperator]


def pilot_directory(config: ExperimentConfig) -> Path:
    """Каталог пилота, ключ — хэш полей конфигурации, от которых зависит пилот."""
    return output_path(config) / "pilot" / config.pilot_hash()[:16]


class RunPhase(Enum):
    """Фазы запуска."""
    IDLE = auto()       # Не запущен
    PILOT = auto()      # Пилотные оценки (средние, Γ̂, коэффициенты)
    TUNE = auto()       # Подбор λ
    EVALUATE = auto()   # Испытания
    REPORT = auto()     # Запись отчётов
    DONE = auto()       # Завершён
    CANCELLED = auto()  # Прерван
    FAILED = auto()     # Ошибка


@dataclass(frozen=True)
class TrialTask:
    """Одно испытание: индекс бюджета и номер испытания."""
    budget_index: int
    trial: int


@dataclass
class TaskResult:
    records: List[TrialRecord] = field(default_factory=list)
    mre: List[MreRecord] = field(default_factory=list)


@dataclass
class RunResult:
    """Итог запуска."""
    records: List[TrialRecord]
    mre: List[MreRecord]
    summary: Dict[str, Any]
    manifest: Dict[str, Any]
    output_dir: Path
    cancelled: bool = False
    pilot_reused: bool = False


@dataclass
class SuiteResult:
    checks: List[CheckResult]
    output_dir: Path

    @property
    def passed(self) -> bool:
        return bool(self.checks) and all(c.passed for c in self.checks)


class Experiment:
    """
    Базовый класс эксперимента.

    Подклассы реализуют pilot, tune, tasks и run_task; run_task не должен
    менять общее состояние, поэтому испытания выполняются параллельно.
    """
    estimator_order: Tuple[str, ...] = ()

    def __init__(self, config: ExperimentConfig):
        self.config = config
        self.selected_lambdas: Dict[str, float] = {}
        self.pilot_artifacts: Dict[str, Any] = {}     # Имя -> PilotArtifact
        self.pilot_gains: Dict[str, float] = {}       # Имя -> скалярный коэффициент

    def pilot(self):
        pass

    def restore_pilot(self, stored: Mapping[str, StoredPilot], gains: Mapping[str, float]):
        """
        Восстановить состояние пилота без повторных выборок.

        Raises:
            KeyError: в сохранённых данных нет нужного элемента
        """
        raise MrmfError(f"{type(self).__name__} не поддерживает сохранённый пилот")

    def tune(self, executor: Optional[ThreadPoolExecutor]):
        pass

    def tasks(self) -> List[TrialTask]:
        return [TrialTask(b, t) for b in range(len(self.config.budgets))
                for t in range(self.config.trials)]

    def run_task(self, task: TrialTask) -> TaskResult:
        raise NotImplementedError

    def failure_records(self, task: TrialTask, names: Sequence[str]) -> List[TrialRecord]:
        """Записи для испытания, в котором оценщик завершился ошибкой."""
        nan = float("nan")
        budget = self.config.budgets[task.budget_index]
        return [TrialRecord(task.trial, budget, name, nan, nan, nan) for name in names]


def make_experiment(config: ExperimentConfig) -> Experiment:
    """Создать эксперимент по виду из конфигурации."""
    if config.kind == ExperimentKind.SIMPLE_GAUSSIAN:
        from experiments.simple_gaussian import SimpleGaussianExperiment
        return SimpleGaussianExperiment(config)
    if config.kind == ExperimentKind.METRIC_LEARNING:
        from experiments.metric_learning_pipeline import MetricLearningExperiment
        return MetricLearningExperiment(config)
    raise MrmfError(f"Вид {config.kind.value} не является экспериментом с испытаниями")


class ExperimentRunner:
    """
    Исполнитель одного эксперимента.
    """

    def __init__(self, config: ExperimentConfig, package_version: str = "0"):
        """
        Инициализация исполнителя.

        Args:
            config: Проверенная конфигурация
            package_version: Версия пакета для манифеста
        """
        self.config = config
        self.package_version = package_version
        self.phase = RunPhase.IDLE
        self._cancel_event = Event()

        # Колбэки
        self._on_progress: Optional[Callable[[int, int], None]] = None
        self._on_phase_change: Optional[Callable[[RunPhase], None]] = None
        self._on_error: Optional[Callable[[str], None]] = None

    def set_callbacks(self,
                      on_progress: Optional[Callable[[int, int], None]] = None,
                      on_phase_change: Optional[Callable[[RunPhase], None]] = None,
                      on_error: Optional[Callable[[str], None]] = None):
        """Установить колбэки для событий."""
        self._on_progress = on_progress
        self._on_phase_change = on_phase_change
        self._on_error = on_error

    def cancel(self):
        """Прервать запуск после текущих испытаний."""
        logger.warning("Запрошена остановка эксперимента")
        self._cancel_event.set()

    def _set_phase(self, phase: RunPhase):
        self.phase = phase
        logger.info(f"Фаза: {phase.name}")
        if self._on_phase_change:
            self._on_phase_change(phase)

    def _report_error(self, message: str):
        logger.error(message)
        if self._on_error:
            self._on_error(message)

    def _run_task(self, experiment: Experiment, task: TrialTask) -> Optional[TaskResult]:
        if self._cancel_event.is_set():
            return None
        try:
            return experiment.run_task(task)
        except Exception as e:
            self._report_error(
                f"Испытание {task.trial} (бюджет {self.config.budgets[task.budget_index]}): {e}"
            )
            return TaskResult(records=experiment.failure_records(task, experiment.estimator_order))

    def evaluate(self, experiment: Experiment,
                 executor: Optional[ThreadPoolExecutor]) -> Tuple[List[TrialRecord], List[MreRecord]]:
        """Выполнить испытания и собрать результаты в детерминированном порядке."""
        tasks = experiment.tasks()
        total = len(tasks)
        results: List[Optional[TaskResult]] = []
        mapped = executor.map(lambda t: self._run_task(experiment, t), tasks) if executor \
            else (self._run_task(experiment, t) for t in tasks)
        for done, result in enumerate(mapped, start=1):
            results.append(result)
            if self._on_progress:
                self._on_progress(done, total)
        order = {name: k for k, name in enumerate(experiment.estimator_order)}
        records = [r for res in results if res for r in res.records]
        records.sort(key=lambda r: (r.budget, r.trial, order.get(r.estimator, len(order))))
        mre = [m for res in results if res for m in res.mre]
        mre.sort(key=lambda m: (m.budget, m.trial, order.get(m.estimator, len(order))))
        return records, mre

    def _save_pilot(self, experiment: Experiment):
        """Записать Γ̂ и средние по структурам, затем индекс с коэффициентами."""
        directory = pilot_directory(self.config)
        for key, artifact in experiment.pilot_artifacts.items():
            store = OperatorStore(StoreConfig(directory / key))
            if not store.write_pilot(artifact.structure, artifact.means, artifact.gamma):
                logger.warning(f"Пилотные результаты {key} не сохранены, индекс не записывается")
                return
        OperatorStore(StoreConfig(directory)).write_index(
            self.config.pilot_hash(), sorted(experiment.pilot_artifacts), experiment.pilot_gains
        )

    def _restore_pilot(self, experiment: Experiment) -> bool:
        """
        Подставить сохранённый пилот той же конфигурации.

        Returns:
            True если пилот восстановлен и пилотную фазу можно пропустить
        """
        directory = pilot_directory(self.config)
        index = OperatorStore(StoreConfig(directory)).read_index(self.config.pilot_hash())
        if index is None:
            return False
        keys, gains = index
        stored: Dict[str, StoredPilot] = {}
        for key in keys:
            value = OperatorStore(StoreConfig(directory / key)).read_pilot()
            if value is None:
                logger.warning(f"Сохранённый пилот {key} недоступен, пилот пересчитывается")
                return False
            stored[key] = value
        try:
            experiment.restore_pilot(stored, gains)
        except (KeyError, MrmfError) as e:
            logger.warning(f"Сохранённый пилот не подходит ({e}), пилот пересчитывается")
            return False
        logger.info(f"Пилот восстановлен из {directory}")
        return True

    def _pilot_phase(self, experiment: Experiment) -> bool:
        """Пилот из хранилища или заново; возвращает признак повторного использования."""
        self._set_phase(RunPhase.PILOT)
        if self._restore_pilot(experiment):
            return True
        experiment.pilot()
        self._save_pilot(experiment)
        return False

    def tune_only(self) -> Dict[str, float]:
        """
        Выполнить только пилот и подбор λ.

        Returns:
            Выбранное λ по бюджетам
        """
        config = self.config
        experiment = make_experiment(config)
        executor = ThreadPoolExecutor(max_workers=config.threads) if config.threads > 1 else None
        try:
            self._pilot_phase(experiment)
            self._set_phase(RunPhase.TUNE)
            experiment.tune(executor)
        except Exception:
            self._set_phase(RunPhase.FAILED)
            raise
        finally:
            if executor:
                executor.shutdown(wait=True)
        self._set_phase(RunPhase.DONE)
        return dict(experiment.selected_lambdas)

    def run_suite(self, suite: Optional[PropertySuiteConfig] = None) -> SuiteResult:
        """
        Выполнить набор проверок свойств и записать properties.json.

        Args:
            suite: Объёмы проверок (None: из конфигурации)
        """
        config = self.config
        out_dir = output_path(config)
        self._set_phase(RunPhase.EVALUATE)
        checks = PropertySuite(suite or config.suite, config.seed)
        results = []
        for done, (name, _) in enumerate(checks.checks, start=1):
            if self._cancel_event.is_set():
                break
            results.extend(checks.run([name]))
            if self._on_progress:
                self._on_progress(done, len(checks.checks))
        self._set_phase(RunPhase.REPORT)
        write_json(out_dir / "properties.json", {
            "seed": config.seed,
            "passed": all(r.passed for r in results),
            "checks": [r.to_dict() for r in results],
        })
        self._set_phase(RunPhase.DONE)
        return SuiteResult(results, out_dir)

    def run(self) -> RunResult:
        """
        Выполнить эксперимент и записать отчёты.

        Returns:
            RunResult с записями, сводкой и манифестом
        """
        config = self.config
        experiment = make_experiment(config)
        out_dir = output_path(config)
        self._cancel_event.clear()
        logger.info(f"Эксперимент '{config.name}': {len(config.budgets)} бюджетов, "
                    f"{config.trials} испытаний, потоков {config.threads}")

        executor = ThreadPoolExecutor(max_workers=config.threads) if config.threads > 1 else None
        try:
            pilot_reused = self._pilot_phase(experiment)

            self._set_phase(RunPhase.TUNE)
            experiment.tune(executor)

            self._set_phase(RunPhase.EVALUATE)
            records, mre = self.evaluate(experiment, executor)
        except Exception:
            self._set_phase(RunPhase.FAILED)
            raise
        finally:
            if executor:
                executor.shutdown(wait=True)

        cancelled = self._cancel_event.is_set()
        self._set_phase(RunPhase.REPORT)
        summary = summarize(records, mre)
        manifest = build_manifest(config, experiment.selected_lambdas, self.package_version)
        manifest["cancelled"] = cancelled
        manifest["pilot_reused"] = pilot_reused
        write_trials_csv(out_dir / "trials.csv", records)
        if mre:
            write_mre_csv(out_dir / "mre.csv", mre)
        write_json(out_dir / "summary.json", summary)
        write_json(out_dir / "manifest.json", manifest)
        write_histogram_csv(out_dir / "histogram.csv", histogram(records, config.histogram_bins))

        self._set_phase(RunPhase.CANCELLED if cancelled else RunPhase.DONE)
        return RunResult(records, mre, summary, manifest, out_dir, cancelled, pilot_reused)
