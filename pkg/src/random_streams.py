"""
Детерминированные потоки случайных чисел.

Каждый поток задаётся ключом (корневое зерно, назначение, индексы),
поэтому пилотные, настроечные и оценочные выборки не пересекаются,
а результат не зависит от порядка выполнения испытаний.
"""

import logging
from enum import IntEnum

import numpy as np

logger = logging.getLogger(__name__)


class Purpose(IntEnum):
    """Назначение потока."""
    PILOT = 1           # Пилотные выборки (Γ̂, средние, коэффициенты)
    TUNE = 2            # Подбор λ
    EVALUATE = 3        # Оценочные испытания
    REFERENCE = 4       # Эталон (метрическое обучение)
    TEST_POINTS = 5     # Тестовые точки MRE
    SELFTEST = 6        # Самопроверка
    PROBLEM = 7         # Генерация случайных постановок


def substream(root_seed: int, purpose: Purpose, *indices: int) -> np.random.Generator:
    """
    Генератор для ключа (root_seed, purpose, *indices).

    Args:
        root_seed: Корневое зерно эксперимента
        purpose: Назначение потока
        indices: Дополнительные индексы (бюджет, испытание, класс, ...)

    Returns:
        Независимый numpy Generator
    """
    if root_seed < 0 or any(i < 0 for i in indices):
        raise ValueError(f"Ключ потока должен быть неотрицательным: {root_seed}, {indices}")
    key = (int(purpose),) + tuple(int(i) for i in indices)
    return np.random.default_rng(np.random.SeedSequence(entropy=int(root_seed), spawn_key=key))
