"""
Геометрическое обучение метрики (GMML).

Матрица метрики лежит на геодезической между T⁻¹ и D, где T и D —
матрицы сходства и различия двух классов.
"""

import logging
from dataclasses import dataclass
from typing import Tuple, Union

import numpy as np

from errors import (
    DimensionMismatchError, IndefiniteInputError, InsufficientSamplesError, NotPositiveDefiniteError,
)
from estimators import MultifidelityEstimate, ScmResult
from spd_core import (
    MatrixLike, SpdMatrix, as_spd, intrinsic_distance, matrix_entries, spd_inv_sqrt, spd_power,
    spd_sqrt,
)

logger = logging.getLogger(__name__)

# Значение t в экспериментах
DEFAULT_GMML_T = 0.1

CovarianceInput = Union[MatrixLike, ScmResult, MultifidelityEstimate]


@dataclass(frozen=True, eq=False)
class MetricMatrix:
    """Матрица метрики A и её происхождение."""
    matrix: SpdMatrix
    t: float
    provenance: str = ""    # Оценщик, давший Γ_0 и Γ_1

    def norm(self, points: np.ndarray) -> np.ndarray:
        """‖y‖_A = √(yᵀAy) для строк points."""
        y = np.atleast_2d(np.asarray(points, dtype=float))
        return np.sqrt(np.maximum(np.einsum("ij,jk,ik->i", y, self.matrix.entries, y), 0.0))


def _require_spd(value: CovarianceInput, name: str) -> SpdMatrix:
    if isinstance(value, (ScmResult, MultifidelityEstimate)):
        if not value.is_spd:
            raise IndefiniteInputError(
                f"{name} знаконеопределена (λ_min = {value.min_eig:.3e}): геодезическая не определена"
            )
        return value.as_spd()
    try:
        return as_spd(value)
    except IndefiniteInputError:
        raise
    except NotPositiveDefiniteError as e:
        raise IndefiniteInputError(f"{name}: {e}") from e


def similarity_dissimilarity(gamma0: CovarianceInput, gamma1: CovarianceInput,
                             m0: np.ndarray, m1: np.ndarray) -> Tuple[SpdMatrix, SpdMatrix]:
    """
    T = Γ_0 + Γ_1, D = T + (m_0 − m_1)(m_0 − m_1)ᵀ.

    Args:
        gamma0: Ковариация класса 0
        gamma1: Ковариация класса 1
        m0: Среднее класса 0
        m1: Среднее класса 1

    Returns:
        (T, D)
    """
    g0 = _require_spd(gamma0, "Γ_0")
    g1 = _require_spd(gamma1, "Γ_1")
    gap = np.asarray(m0, dtype=float) - np.asarray(m1, dtype=float)
    if g0.dim != g1.dim or gap.shape != (g0.dim,):
        raise DimensionMismatchError("Несогласованные размерности ковариаций и средних")
    t = g0.entries + g1.entries
    return SpdMatrix(t), SpdMatrix(t + np.outer(gap, gap))


def gmml_metric(T: CovarianceInput, D: CovarianceInput, t: float = DEFAULT_GMML_T,
                provenance: str = "") -> MetricMatrix:
    """
    A = T^{−½}(T^{½} D T^{½})^t T^{−½}.

    Знаконеопределённые входы не исправляются: IndefiniteInputError.
    """
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"Параметр t = {t} вне [0, 1]")
    t_mat = _require_spd(T, "T")
    d_mat = _require_spd(D, "D")
    if t_mat.dim != d_mat.dim:
        raise DimensionMismatchError("T и D разной размерности")
    root = spd_sqrt(t_mat).entries
    inv_root = spd_inv_sqrt(t_mat).entries
    inner = spd_power(SpdMatrix(root @ d_mat.entries @ root), t).entries
    return MetricMatrix(SpdMatrix(inv_root @ inner @ inv_root), t, provenance)


def estimate_metric(gamma0: CovarianceInput, gamma1: CovarianceInput, m0: np.ndarray,
                    m1: np.ndarray, t: float = DEFAULT_GMML_T,
                    provenance: str = "") -> MetricMatrix:
    """Метрика GMML по оценкам ковариаций и средних классов."""
    T, D = similarity_dissimilarity(gamma0, gamma1, m0, m1)
    return gmml_metric(T, D, t, provenance)


def mean_relative_error(a_hat: Union[MetricMatrix, SpdMatrix],
                        a_ref: Union[MetricMatrix, SpdMatrix],
                        test_points: np.ndarray) -> float:
    """
    MRE = (1/n) Σ_i |‖y_i‖_Â − ‖y_i‖_A| / ‖y_i‖_A.

    Точки с ‖y‖_A = 0 исключаются с предупреждением.
    """
    hat = a_hat if isinstance(a_hat, MetricMatrix) else MetricMatrix(as_spd(a_hat), float("nan"))
    ref = a_ref if isinstance(a_ref, MetricMatrix) else MetricMatrix(as_spd(a_ref), float("nan"))
    points = np.atleast_2d(np.asarray(test_points, dtype=float))
    if points.shape[0] == 0:
        raise InsufficientSamplesError("Пустой набор тестовых точек")
    if points.shape[1] != ref.matrix.dim or hat.matrix.dim != ref.matrix.dim:
        raise DimensionMismatchError("Тестовые точки и метрики разной размерности")
    ref_norm = ref.norm(points)
    keep = ref_norm > 0.0
    if not np.all(keep):
        logger.warning(f"Исключено {int(np.sum(~keep))} тестовых точек с нулевой нормой")
    if not np.any(keep):
        raise InsufficientSamplesError("Все тестовые точки имеют нулевую норму")
    hat_norm = hat.norm(points[keep])
    return float(np.mean(np.abs(hat_norm - ref_norm[keep]) / ref_norm[keep]))


def metric_errors(a_hat: Union[MetricMatrix, MatrixLike],
                  a_ref: Union[MetricMatrix, MatrixLike]) -> Tuple[float, float]:
    """(‖Â − A‖²_F, d²(Â, A))."""
    hat = a_hat.matrix if isinstance(a_hat, MetricMatrix) else as_spd(a_hat)
    ref = a_ref.matrix if isinstance(a_ref, MetricMatrix) else as_spd(a_ref)
    diff = matrix_entries(hat) - matrix_entries(ref)
    return float(np.sum(diff * diff)), intrinsic_distance(hat, ref) ** 2


def bifidelity_mean(y_hi: np.ndarray, y_lo_coupled: np.ndarray,
                    y_lo_all: np.ndarray) -> np.ndarray:
    """
    Двухуровневая оценка среднего с управляющей переменной по координатам.

    ȳ_hi + α_j (ȳ_lo,all − ȳ_lo,coupled), α_j = Cov(y_hi,j, y_lo,j)/Var(y_lo,j)
    по связанным выборкам.
    """
    hi = np.atleast_2d(np.asarray(y_hi, dtype=float))
    lo = np.atleast_2d(np.asarray(y_lo_coupled, dtype=float))
    lo_all = np.atleast_2d(np.asarray(y_lo_all, dtype=float))
    if hi.shape != lo.shape or lo_all.shape[1] != hi.shape[1]:
        raise DimensionMismatchError("Несогласованные формы выборок для среднего")
    if hi.shape[0] < 2:
        raise InsufficientSamplesError("Для коэффициентов нужно не меньше 2 связанных пар")
    hc = hi - hi.mean(axis=0)
    lc = lo - lo.mean(axis=0)
    var = np.sum(lc * lc, axis=0)
    cov = np.sum(hc * lc, axis=0)
    alpha = np.divide(cov, var, out=np.zeros_like(cov), where=var > 0)
    return hi.mean(axis=0) + alpha * (lo_all.mean(axis=0) - lo.mean(axis=0))
