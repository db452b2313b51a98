"""
Генераторы данных: связанные гауссовы модели высокой и низкой точности,
выборочные ковариации по бюджету, экспоненциально-обёрнутая гауссова
модель на ℙ_d^N и двухклассовая смесь для метрического обучения.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.linalg import LinAlgError, cholesky

from errors import ConfigError, DimensionMismatchError, InsufficientSamplesError
from estimators import ScmResult, scm
from spd_core import SpdMatrix, as_spd, riemannian_exp, symmetrize
from tangent_algebra import TangentOperator, block_diagonal, tangent_size, unflat_array

logger = logging.getLogger(__name__)

# Запас на ошибки округления при вычислении числа выборок
FLOOR_SLACK = 1e-9


def wishart_covariance(dim: int, rng: np.random.Generator) -> SpdMatrix:
    """Σ_hi = AᵀA, A — d×d со стандартными нормальными элементами."""
    a = rng.standard_normal((dim, dim))
    return SpdMatrix(a.T @ a)


# ----------------------------------------------------------------------
# Связанная гауссова модель
# ----------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class GaussianCoupledModel:
    """
    X_hi ∼ N(0, Σ_hi), X_lo = X_hi + ε, ε ∼ N(0, σ²I).
    """
    sigma_hi: SpdMatrix
    noise_var: float

    def __post_init__(self):
        object.__setattr__(self, "sigma_hi", as_spd(self.sigma_hi))
        if not self.noise_var >= 0.0:
            raise ConfigError(f"Дисперсия шума должна быть неотрицательной: {self.noise_var}")

    @property
    def dim(self) -> int:
        return self.sigma_hi.dim

    @property
    def sigma_lo(self) -> SpdMatrix:
        return SpdMatrix(self.sigma_hi.entries + self.noise_var * np.eye(self.dim))

    @property
    def joint_covariance(self) -> np.ndarray:
        """[[Σ_hi, Σ_hi], [Σ_hi, Σ_hi + σ²I]]."""
        s = self.sigma_hi.entries
        return np.block([[s, s], [s, self.sigma_lo.entries]])

    def sample_high(self, count: int, rng: np.random.Generator) -> np.ndarray:
        return rng.multivariate_normal(np.zeros(self.dim), self.sigma_hi.entries,
                                       size=count, method="eigh")

    def sample_pairs(self, count: int, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
        """count связанных пар (X_hi, X_lo): общий X_hi и независимый шум."""
        x_hi = self.sample_high(count, rng)
        x_lo = x_hi + math.sqrt(self.noise_var) * rng.standard_normal((count, self.dim))
        return x_hi, x_lo

    def sample_low(self, count: int, rng: np.random.Generator) -> np.ndarray:
        """Независимые выборки низкой точности."""
        return self.sample_pairs(count, rng)[1]


# ----------------------------------------------------------------------
# Бюджет
# ----------------------------------------------------------------------

@dataclass(frozen=True)
class BudgetAllocation:
    """Распределение бюджета: M1 связанных пар и M2 дополнительных выборок низкой точности."""
    c_hi: float     # Стоимость выборки высокой точности
    c_lo: float     # Стоимость выборки низкой точности
    budget: float   # Общий бюджет B
    m1: int
    m2: int

    def __post_init__(self):
        if self.c_hi <= 0 or self.c_lo <= 0 or self.budget <= 0:
            raise ConfigError("Стоимости и бюджет должны быть положительными")
        if self.m1 < 2:
            raise InsufficientSamplesError(f"M1 = {self.m1}: нужно не меньше 2 связанных пар")
        if self.m2 < 0:
            raise ConfigError(f"M2 = {self.m2} отрицательно")
        if self.cost > self.budget * (1.0 + FLOOR_SLACK):
            raise ConfigError(
                f"Стоимость {self.cost:.6g} превышает бюджет {self.budget:.6g} "
                f"(M1 = {self.m1}, M2 = {self.m2})"
            )

    @property
    def cost(self) -> float:
        """M1·(c_hi + c_lo) + M2·c_lo."""
        return self.m1 * (self.c_hi + self.c_lo) + self.m2 * self.c_lo

    @property
    def low_count(self) -> int:
        return self.m1 + self.m2

    @property
    def hf_only_count(self) -> int:
        """Число выборок высокой точности на тот же бюджет."""
        return int(math.floor(self.budget / self.c_hi + FLOOR_SLACK))

    @property
    def lf_only_count(self) -> int:
        return int(math.floor(self.budget / self.c_lo + FLOOR_SLACK))

    @classmethod
    def from_fraction(cls, budget: float, c_hi: float, c_lo: float,
                      fraction: float) -> "BudgetAllocation":
        """
        M1 = ⌊ρB/(c_hi + c_lo)⌋, M2 = ⌊(1 − ρ)B/c_lo⌋.

        Args:
            budget: Бюджет B
            c_hi: Стоимость высокой точности
            c_lo: Стоимость низкой точности
            fraction: Доля ρ ∈ (0, 1] на связанные пары
        """
        if not 0.0 < fraction <= 1.0:
            raise ConfigError(f"Доля связанных пар вне (0, 1]: {fraction}")
        m1 = int(math.floor(fraction * budget / (c_hi + c_lo) + FLOOR_SLACK))
        m2 = int(math.floor((1.0 - fraction) * budget / c_lo + FLOOR_SLACK))
        return cls(c_hi, c_lo, budget, m1, m2)


def allocation_from_fraction(budget: float, c_hi: float, c_lo: float,
                             fraction: float) -> BudgetAllocation:
    """Распределение бюджета по доле ρ с журналом полученных (M1, M2)."""
    allocation = BudgetAllocation.from_fraction(budget, c_hi, c_lo, fraction)
    logger.debug(f"Бюджет {budget:.6g}, ρ = {fraction}: M1 = {allocation.m1}, "
                 f"M2 = {allocation.m2}, стоимость {allocation.cost:.6g}")
    return allocation


# ----------------------------------------------------------------------
# Выборочные ковариации
# ----------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class CoupledScms:
    """SCM одной реализации эксперимента."""
    s_hi: ScmResult
    s_lo: ScmResult                 # По связанным X_lo
    s_lo_extra: Optional[ScmResult] # По M2 дополнительным X_lo (None при M2 < 2)
    s_bar_lo: ScmResult             # По всем M1 + M2 выборкам X_lo
    allocation: BudgetAllocation


def draw_coupled_scms(model: GaussianCoupledModel, allocation: BudgetAllocation,
                      rng: np.random.Generator) -> CoupledScms:
    """
    Сгенерировать M1 связанных пар и M2 независимых X_lo и построить SCM.

    Args:
        model: Связанная модель
        allocation: Распределение бюджета
        rng: Поток случайных чисел

    Returns:
        (S_hi, S¹_lo, S²_lo, S̄_lo) с флагами определённости
    """
    x_hi, x_lo = model.sample_pairs(allocation.m1, rng)
    extra = model.sample_low(allocation.m2, rng)
    s_extra = scm(extra) if allocation.m2 >= 2 else None
    return CoupledScms(
        s_hi=scm(x_hi),
        s_lo=scm(x_lo),
        s_lo_extra=s_extra,
        s_bar_lo=scm(np.concatenate([x_lo, extra])),
        allocation=allocation,
    )


def draw_single_fidelity_scm(model: GaussianCoupledModel, count: int, fidelity: int,
                             rng: np.random.Generator) -> ScmResult:
    """SCM одной точности (0: высокая, 1: низкая) по count выборкам."""
    if fidelity == 0:
        return scm(model.sample_high(count, rng))
    if fidelity == 1:
        return scm(model.sample_low(count, rng))
    raise ConfigError(f"Неизвестная точность {fidelity}")


# ----------------------------------------------------------------------
# Аналитические моменты SCM
# ----------------------------------------------------------------------

def scm_variance_trace(sigma: SpdMatrix, count: int) -> float:
    """E‖S − Σ‖²_F = ((tr Σ)² + tr Σ²)/(M − 1) для гауссовой SCM."""
    s = sigma.entries
    return (float(np.trace(s)) ** 2 + float(np.sum(s * s))) / (count - 1)


def scm_cross_trace(model: GaussianCoupledModel, count: int) -> float:
    """E⟨S_hi − Σ_hi, S_lo − Σ_lo⟩_F для связанных SCM: Cov(X_hi, X_lo) = Σ_hi."""
    return scm_variance_trace(model.sigma_hi, count)


def optimal_scalar_gain(model: GaussianCoupledModel) -> float:
    """α* = ((tr Σ_hi)² + tr Σ_hi²)/((tr Σ_lo)² + tr Σ_lo²); множители 1/(M − 1) сокращаются."""
    return scm_cross_trace(model, 2) / scm_variance_trace(model.sigma_lo, 2)


# ----------------------------------------------------------------------
# Экспоненциально-обёрнутая гауссова модель
# ----------------------------------------------------------------------

def symmetric_factor(gamma: np.ndarray) -> np.ndarray:
    """L с L·Lᵀ = Γ: Холецкий, для вырожденного Γ — спектральный корень."""
    gamma = symmetrize(np.asarray(gamma, dtype=float))
    try:
        return cholesky(gamma, lower=True)
    except LinAlgError:
        lam, vecs = np.linalg.eigh(gamma)
        scale = max(1.0, float(np.max(np.abs(lam))))
        if float(lam[0]) < -1e-10 * scale:
            raise LinAlgError(f"Γ не является неотрицательно определённым: λ_min = {lam[0]:.3e}")
        return vecs * np.sqrt(np.clip(lam, 0.0, None))


@dataclass(frozen=True, eq=False)
class WrappedGaussian:
    """𝐒 = exp_Σ 𝓔, 𝓔 ∼ N(0, Γ) на ℍ_d^N."""
    sigmas: Tuple[SpdMatrix, ...]
    gamma: TangentOperator
    factor: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        sigmas = tuple(as_spd(s) for s in self.sigmas)
        dims = {s.dim for s in sigmas}
        if len(dims) != 1 or dims.pop() != self.gamma.dim:
            raise DimensionMismatchError("Средние и Γ имеют разную размерность")
        n = len(sigmas) * tangent_size(self.gamma.dim)
        if self.gamma.matrix.shape != (n, n):
            raise DimensionMismatchError(f"Γ формы {self.gamma.matrix.shape}, ожидалось {(n, n)}")
        object.__setattr__(self, "sigmas", sigmas)
        object.__setattr__(self, "factor", symmetric_factor(self.gamma.matrix))

    def sample_tangent(self, rng: np.random.Generator, count: int) -> np.ndarray:
        """Кодировки 𝓔, массив (count, Nq)."""
        z = rng.standard_normal((count, self.factor.shape[1]))
        return z @ self.factor.T

    def sample(self, rng: np.random.Generator, count: int = 1) -> List[Tuple[SpdMatrix, ...]]:
        dim = self.gamma.dim
        q = tangent_size(dim)
        draws = []
        for e in self.sample_tangent(rng, count):
            parts = unflat_array(e.reshape(len(self.sigmas), q), dim)
            draws.append(tuple(riemannian_exp(s, x) for s, x in zip(self.sigmas, parts)))
        return draws


def draw_wrapped_gaussian(sigmas: Sequence[SpdMatrix], gamma: TangentOperator,
                          rng: np.random.Generator) -> List[SpdMatrix]:
    """
    Одна реализация стека exp_{Σ_n}(𝓔_n).

    Args:
        sigmas: Средние по слотам
        gamma: Неотрицательно определённый оператор ковариации 𝓔
        rng: Поток случайных чисел

    Returns:
        N SPD-матриц
    """
    return list(WrappedGaussian(tuple(sigmas), gamma).sample(rng, 1)[0])


# ----------------------------------------------------------------------
# Двухклассовая смесь
# ----------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class TwoClassMixture:
    """
    Равновесная смесь N(m_0, Γ_0) и N(m_1, Γ_1).

    Наблюдаемая низкой точности y_lo = y + bias + η, η ∼ N(0, noise).
    """
    means: Tuple[np.ndarray, np.ndarray]
    covariances: Tuple[SpdMatrix, SpdMatrix]
    low_fidelity_bias: np.ndarray
    low_fidelity_noise: SpdMatrix

    def __post_init__(self):
        covs = tuple(as_spd(c) for c in self.covariances)
        means = tuple(np.asarray(m, dtype=float) for m in self.means)
        dim = covs[0].dim
        if len(covs) != 2 or len(means) != 2:
            raise DimensionMismatchError("Смесь задаётся ровно двумя классами")
        bias = np.asarray(self.low_fidelity_bias, dtype=float)
        noise = as_spd(self.low_fidelity_noise)
        if any(c.dim != dim for c in covs) or any(m.shape != (dim,) for m in means) \
                or bias.shape != (dim,) or noise.dim != dim:
            raise DimensionMismatchError("Несогласованные размерности параметров смеси")
        object.__setattr__(self, "covariances", covs)
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "low_fidelity_bias", bias)
        object.__setattr__(self, "low_fidelity_noise", noise)

    @property
    def dim(self) -> int:
        return self.covariances[0].dim

    def sample_class(self, label: int, count: int,
                     rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
        """count связанных пар (y_hi, y_lo) класса label."""
        if label not in (0, 1):
            raise ConfigError(f"Неизвестный класс {label}")
        y = rng.multivariate_normal(self.means[label], self.covariances[label].entries,
                                    size=count, method="eigh")
        eta = rng.multivariate_normal(np.zeros(self.dim), self.low_fidelity_noise.entries,
                                      size=count, method="eigh")
        return y, y + self.low_fidelity_bias + eta

    def sample_low(self, label: int, count: int, rng: np.random.Generator) -> np.ndarray:
        return self.sample_class(label, count, rng)[1]

    def sample(self, count: int, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
        """(y, метки) из равновесной смеси."""
        labels = rng.integers(0, 2, size=count)
        y = np.empty((count, self.dim))
        for label in (0, 1):
            idx = np.flatnonzero(labels == label)
            if idx.size:
                y[idx] = self.sample_class(label, idx.size, rng)[0]
        return y, labels


def make_two_class_mixture(dim: int, separation: float,
                           covariances: Optional[Sequence[SpdMatrix]] = None,
                           rng: Optional[np.random.Generator] = None,
                           noise_var: float = 0.1, bias: float = 0.0) -> TwoClassMixture:
    """
    Синтетическая двухклассовая смесь.

    Args:
        dim: Размерность наблюдаемой
        separation: ‖m_1 − m_0‖ (m_0 = 0, направление случайное или e_1)
        covariances: Γ_0, Γ_1 (по умолчанию уишартовские из rng)
        rng: Поток для случайных параметров
        noise_var: Дисперсия шума η низкой точности
        bias: Сдвиг среднего низкой точности по каждой координате
    """
    if noise_var <= 0:
        raise ConfigError(f"Дисперсия шума низкой точности должна быть положительной: {noise_var}")
    if covariances is None:
        if rng is None:
            raise ConfigError("Для случайных ковариаций классов нужен генератор")
        covariances = (SpdMatrix(wishart_covariance(dim, rng).entries / dim),
                       SpdMatrix(wishart_covariance(dim, rng).entries / dim))
    if rng is None:
        direction = np.eye(dim)[0]
    else:
        direction = rng.standard_normal(dim)
        direction /= np.linalg.norm(direction)
    return TwoClassMixture(
        means=(np.zeros(dim), separation * direction),
        covariances=tuple(covariances),
        low_fidelity_bias=np.full(dim, float(bias)),
        low_fidelity_noise=SpdMatrix(noise_var * np.eye(dim)),
    )


def block_coupled_gamma(dim: int, structure, scale: float = 0.01,
                        correlation: float = 0.8) -> TangentOperator:
    """
    Оператор ковариации s·((1 − ρ)I + ρ·11ᵀ) ⊗ I_q внутри каждой группы.

    Межгрупповые блоки нулевые; при |ρ| < 1 оператор положительно определён.
    """
    if scale <= 0 or not -1.0 < correlation < 1.0:
        raise ConfigError(f"Недопустимые параметры Γ: s = {scale}, ρ = {correlation}")
    q = tangent_size(dim)
    blocks = []
    for group in structure.groups:
        size = len(group)
        coupling = (1.0 - correlation) * np.eye(size) + correlation * np.ones((size, size))
        blocks.append(TangentOperator(dim, scale * np.kron(coupling, np.eye(q))))
    return block_diagonal(blocks).attach_structure(structure)
