"""
Конфигурация экспериментов.
JSON-файлы из config/ разбираются в датаклассы с проверкой значений.
"""

import hashlib
import json
import logging
import os
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Tuple

import numpy as np

from errors import ConfigError
from estimators import MrmfSettings

logger = logging.getLogger(__name__)

# Переменные окружения
ENV_OUTPUT_DIR = "MRMF_OUTPUT_DIR"
ENV_THREADS = "MRMF_THREADS"


class ExperimentKind(Enum):
    """Виды экспериментов."""
    SIMPLE_GAUSSIAN = "simple-gaussian"     # Связанная гауссова модель
    METRIC_LEARNING = "metric-learning"     # GMML на двухклассовой смеси
    PROPERTY_SUITE = "property-suite"       # Проверка свойств всех модулей


ESTIMATOR_NAMES = ("hf", "lf", "emf", "lemf", "mrmf", "mrmf_full")

# Поля, определяющие пилот; число испытаний, потоки и сетка λ на него не влияют
PILOT_FIELDS = ("kind", "dim", "noise_var", "budgets", "allocation", "pilot_count", "seed",
                "estimators", "mixture")


def default_lambda_grid() -> List[float]:
    """18 значений, логарифмически равномерно на [1e-3, 1e2]."""
    return [float(x) for x in np.logspace(-3.0, 2.0, 18)]


@dataclass
class AllocationConfig:
    """Стоимости и распределение бюджета."""
    c_hi: float = 1.0
    c_lo: float = 0.01
    fraction: Optional[float] = 0.85            # Доля бюджета на связанные пары
    counts: Optional[List[List[int]]] = None    # Явные [M1, M2] для каждого бюджета


@dataclass
class MixtureConfig:
    """Параметры двухклассовой смеси."""
    separation: float = 2.0         # ‖m_1 − m_0‖
    noise_var: float = 0.1          # Дисперсия шума низкой точности
    bias: float = 0.0               # Сдвиг среднего низкой точности
    reference_samples: int = 12000  # Выборки для эталонной метрики
    test_points: int = 5000         # Тестовые точки MRE
    t: float = 0.1                  # Параметр геодезической GMML


@dataclass
class PropertySuiteConfig:
    """Объёмы проверок набора свойств."""
    dims: List[int] = field(default_factory=lambda: [2, 3, 4, 6])
    geometry_pairs: int = 500
    weighted_instances: int = 100
    precondition_instances: int = 20
    residual_instances: int = 50
    target_trials: int = 2000
    target_dims: List[int] = field(default_factory=lambda: [3, 4])
    gain_trials: int = 5000
    gradient_points: int = 20
    gmml_pairs: int = 50


@dataclass
class ExperimentConfig:
    """Полная конфигурация эксперимента."""
    kind: ExperimentKind = ExperimentKind.SIMPLE_GAUSSIAN
    name: str = "experiment"
    dim: int = 4
    noise_var: float = 0.7                  # σ² связанной модели
    budgets: List[float] = field(default_factory=lambda: [6.0, 56.0, 106.0, 156.0, 206.0])
    allocation: AllocationConfig = field(default_factory=AllocationConfig)
    pilot_count: int = 1000
    lambda_grid: List[float] = field(default_factory=default_lambda_grid)
    tune_trials: int = 32
    trials: int = 500
    seed: int = 20240101
    estimators: List[str] = field(default_factory=lambda: ["hf", "lf", "emf", "lemf", "mrmf"])
    output_dir: str = "results"
    threads: int = 1
    record_wall_time: bool = False
    histogram_bins: int = 30
    optimizer: Dict[str, Any] = field(default_factory=dict)
    mixture: MixtureConfig = field(default_factory=MixtureConfig)
    suite: PropertySuiteConfig = field(default_factory=PropertySuiteConfig)

    def __post_init__(self):
        self.validate()

    @property
    def settings(self) -> MrmfSettings:
        return MrmfSettings.from_dict(self.optimizer)

    def allocation_counts(self) -> List[Optional[Tuple[int, int]]]:
        """Явные (M1, M2) по бюджетам или None при распределении по доле."""
        if self.allocation.counts is None:
            return [None] * len(self.budgets)
        return [(int(m1), int(m2)) for m1, m2 in self.allocation.counts]

    def validate(self):
        """Проверить значения; ConfigError называет путь к ключу."""
        positive_ints = {
            "dim": self.dim, "pilot_count": self.pilot_count, "tune_trials": self.tune_trials,
            "trials": self.trials, "threads": self.threads, "histogram_bins": self.histogram_bins,
            "mixture.reference_samples": self.mixture.reference_samples,
            "mixture.test_points": self.mixture.test_points,
        }
        for key, value in positive_ints.items():
            if not isinstance(value, int) or isinstance(value, bool) or value < 1:
                raise ConfigError(f"{key}: ожидалось положительное целое, получено {value!r}")
        for key in ("geometry_pairs", "weighted_instances", "precondition_instances",
                    "residual_instances", "target_trials", "gain_trials", "gradient_points",
                    "gmml_pairs"):
            value = getattr(self.suite, key)
            if not isinstance(value, int) or value < 1:
                raise ConfigError(f"suite.{key}: ожидалось положительное целое, получено {value!r}")
        if self.noise_var < 0:
            raise ConfigError(f"noise_var: отрицательная дисперсия {self.noise_var}")
        if not self.budgets or any(b <= 0 for b in self.budgets):
            raise ConfigError("budgets: нужен непустой список положительных бюджетов")
        if list(self.budgets) != sorted(self.budgets):
            raise ConfigError(f"budgets: сетка должна быть отсортирована по возрастанию: {self.budgets}")
        if not self.lambda_grid or any(x < 0 for x in self.lambda_grid):
            raise ConfigError("lambda_grid: нужен непустой список неотрицательных λ")
        unknown = [e for e in self.estimators if e not in ESTIMATOR_NAMES]
        if unknown or not self.estimators:
            raise ConfigError(f"estimators: неизвестные оценщики {unknown}, допустимы {ESTIMATOR_NAMES}")
        alloc = self.allocation
        if alloc.c_hi <= 0 or alloc.c_lo <= 0:
            raise ConfigError("allocation: стоимости должны быть положительными")
        if alloc.counts is None:
            if alloc.fraction is None or not 0.0 < alloc.fraction <= 1.0:
                raise ConfigError(f"allocation.fraction: доля вне (0, 1]: {alloc.fraction}")
        elif len(alloc.counts) != len(self.budgets) or any(len(c) != 2 for c in alloc.counts):
            raise ConfigError("allocation.counts: нужна пара [M1, M2] для каждого бюджета")
        if not 0.0 <= self.mixture.t <= 1.0:
            raise ConfigError(f"mixture.t: значение вне [0, 1]: {self.mixture.t}")
        if self.mixture.noise_var <= 0:
            raise ConfigError("mixture.noise_var: дисперсия должна быть положительной")
        try:
            self.settings
        except ConfigError as e:
            raise ConfigError(f"optimizer: {e}") from e

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "ExperimentConfig":
        return _build(cls, data, "")

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["kind"] = self.kind.value
        return data

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"), ensure_ascii=False)

    def config_hash(self) -> str:
        """SHA-256 канонического JSON."""
        return hashlib.sha256(self.canonical_json().encode("utf-8")).hexdigest()

    def pilot_hash(self) -> str:
        """SHA-256 только тех полей, от которых зависит пилотная фаза."""
        data = {key: value for key, value in self.to_dict().items() if key in PILOT_FIELDS}
        text = json.dumps(data, sort_keys=True, separators=(",", ":"), ensure_ascii=False)
        return hashlib.sha256(text.encode("utf-8")).hexdigest()


def _build(cls, data: Any, path: str):
    if not isinstance(data, Mapping):
        raise ConfigError(f"{path or '<root>'}: ожидался объект, получено {type(data).__name__}")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"{path or '<root>'}: неизвестные ключи {unknown}")
    kwargs = {}
    for name, value in data.items():
        key = f"{path}.{name}" if path else name
        default = known[name].default_factory() if callable(known[name].default_factory) \
            else known[name].default
        if value is None:
            pass
        elif name == "kind":
            try:
                value = ExperimentKind(value)
            except ValueError:
                raise ConfigError(f"{key}: неизвестный вид эксперимента {value!r}")
        elif is_dataclass(default):
            value = _build(type(default), value, key)
        elif isinstance(default, bool):
            if not isinstance(value, bool):
                raise ConfigError(f"{key}: ожидалось логическое значение, получено {value!r}")
        elif isinstance(default, int) and not isinstance(default, bool):
            if not isinstance(value, int) or isinstance(value, bool):
                raise ConfigError(f"{key}: ожидалось целое, получено {value!r}")
        elif isinstance(default, float):
            if not isinstance(value, (int, float)) or isinstance(value, bool):
                raise ConfigError(f"{key}: ожидалось число, получено {value!r}")
            value = float(value)
        elif isinstance(default, list):
            if not isinstance(value, list):
                raise ConfigError(f"{key}: ожидался список, получено {value!r}")
        elif isinstance(default, str) and not isinstance(value, str):
            raise ConfigError(f"{key}: ожидалась строка, получено {value!r}")
        kwargs[name] = value
    try:
        return cls(**kwargs)
    except TypeError as e:
        raise ConfigError(f"{path or '<root>'}: {e}") from e


def apply_environment(config: ExperimentConfig) -> ExperimentConfig:
    """Переопределения из MRMF_OUTPUT_DIR и MRMF_THREADS."""
    output_dir = os.environ.get(ENV_OUTPUT_DIR)
    if output_dir:
        config.output_dir = output_dir
    threads = os.environ.get(ENV_THREADS)
    if threads:
        try:
            config.threads = int(threads)
        except ValueError:
            raise ConfigError(f"{ENV_THREADS}: ожидалось целое, получено {threads!r}")
        if config.threads < 1:
            raise ConfigError(f"{ENV_THREADS}: число потоков должно быть положительным")
    return config


def load_config(path) -> ExperimentConfig:
    """
    Загрузить конфигурацию из JSON.

    Args:
        path: Путь к файлу

    Returns:
        Проверенная конфигурация с учётом переменных окружения

    Raises:
        ConfigError: файл не читается или содержит ошибки
    """
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except OSError as e:
        raise ConfigError(f"Не удалось прочитать конфигурацию {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: некорректный JSON: {e}") from e
    config = apply_environment(ExperimentConfig.from_dict(data))
    logger.info(f"Загружена конфигурация '{config.name}' ({config.kind.value}) из {path}")
    return config


# Предустановленные эксперименты
PRESET_EXPERIMENTS = {
    ExperimentKind.SIMPLE_GAUSSIAN: ExperimentConfig(
        kind=ExperimentKind.SIMPLE_GAUSSIAN,
        name="simple-gaussian",
        dim=4,
        noise_var=0.7,              # σ² = 0.7
        budgets=[6.0, 56.0, 106.0, 156.0, 206.0],
        trials=500,
        pilot_count=1000,
    ),
    ExperimentKind.METRIC_LEARNING: ExperimentConfig(
        kind=ExperimentKind.METRIC_LEARNING,
        name="metric-learning",
        dim=4,
        budgets=[17.0],             # Бюджет на класс
        allocation=AllocationConfig(c_hi=1.0, c_lo=1.0 / 256.0, fraction=None,
                                    counts=[[15, 497]]),
        lambda_grid=[1e-2, 1e-1, 1.0, 1e1],
        tune_trials=16,
        trials=200,
        pilot_count=1000,
        estimators=["hf", "lf", "mrmf"],
    ),
    ExperimentKind.PROPERTY_SUITE: ExperimentConfig(
        kind=ExperimentKind.PROPERTY_SUITE,
        name="property-suite",
    ),
}

# Уменьшенные объёмы для самопроверки
SELFTEST_SUITE = PropertySuiteConfig(
    dims=[2, 3],
    geometry_pairs=20,
    weighted_instances=5,
    precondition_instances=2,
    residual_instances=3,
    target_trials=200,
    target_dims=[2],
    gain_trials=4000,
    gradient_points=3,
    gmml_pairs=5,
)


def output_path(config: ExperimentConfig) -> Path:
    path = Path(config.output_dir) / config.name
    path.mkdir(parents=True, exist_ok=True)
    return path
