"""
Исключения библиотеки многоточностной оценки ковариаций.
"""

from typing import Dict, Optional


class MrmfError(Exception):
    """Базовое исключение пакета."""


class DimensionMismatchError(MrmfError, ValueError):
    """Несогласованные размерности матриц, стеков или операторов."""


class NotPositiveDefiniteError(MrmfError, ValueError):
    """Матрица не является симметричной положительно определённой."""


class IndefiniteInputError(NotPositiveDefiniteError):
    """Знаконеопределённая оценка подана туда, где нужна SPD-матрица."""


class SingularOperatorError(MrmfError, ArithmeticError):
    """Оператор численно вырожден (оценка обусловленности > 1e14)."""


class StructureError(MrmfError, ValueError):
    """Нарушена структура групп точностей или постановки задачи."""


class InsufficientSamplesError(MrmfError, ValueError):
    """Недостаточно выборок для оценки."""


class DegenerateGainError(MrmfError, ZeroDivisionError):
    """Нулевой знаменатель при вычислении коэффициента управляющей переменной."""


class ConvergenceError(MrmfError, RuntimeError):
    """Итерационный метод не сошёлся."""

    def __init__(self, message: str, residual: Optional[float] = None,
                 iterations: Optional[int] = None):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations


class ConfigError(MrmfError, ValueError):
    """Ошибка в конфигурации эксперимента."""


class ReportError(MrmfError, ValueError):
    """Повреждённый или пустой файл отчёта."""


# Коды завершения CLI
EXIT_OK = 0
EXIT_CONFIG_ERROR = 1
EXIT_RUNTIME_FAILURE = 2
EXIT_SELFTEST_FAILURE = 3

EXIT_CODE_DESCRIPTIONS: Dict[int, str] = {
    EXIT_OK: "Успешное завершение",
    EXIT_CONFIG_ERROR: "Ошибка конфигурации",
    EXIT_RUNTIME_FAILURE: "Ошибка выполнения",
    EXIT_SELFTEST_FAILURE: "Самопроверка не пройдена",
}
