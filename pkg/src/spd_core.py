"""
Геометрия многообразия SPD-матриц с аффинно-инвариантной метрикой.

Все матричные функции считаются через спектральное разложение (eigh),
поэтому результат всегда точно симметричен. Разложение кэшируется
на объекте SpdMatrix.
"""

import logging
from dataclasses import dataclass
from functools import cached_property
from typing import Callable, Optional, Sequence, Tuple, Union

import numpy as np

from errors import DimensionMismatchError, MrmfError, NotPositiveDefiniteError

logger = logging.getLogger(__name__)

# Относительный порог положительной определённости
EPS_PD = 1e-12

ScalarFunction = Callable[[np.ndarray], np.ndarray]


def symmetrize(matrix: np.ndarray) -> np.ndarray:
    """Симметричная часть (M + Mᵀ)/2."""
    return 0.5 * (matrix + matrix.T)


def pd_threshold(eigenvalues: np.ndarray) -> float:
    """Порог ε_pd = 1e-12·max(1, λ_max)."""
    return EPS_PD * max(1.0, float(np.max(eigenvalues)))


def _square_array(entries) -> np.ndarray:
    arr = np.array(entries, dtype=float)
    if arr.ndim != 2 or arr.shape[0] != arr.shape[1] or arr.shape[0] == 0:
        raise DimensionMismatchError(f"Ожидалась квадратная матрица, получено {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise MrmfError("Матрица содержит нечисловые значения")
    arr = symmetrize(arr)
    arr.setflags(write=False)
    return arr


def _from_eig(eigenvalues: np.ndarray, eigenvectors: np.ndarray) -> np.ndarray:
    return symmetrize((eigenvectors * eigenvalues) @ eigenvectors.T)


@dataclass(frozen=True, eq=False)
class SymMatrix:
    """Симметричная матрица: касательный вектор из ℍ_d."""
    entries: np.ndarray     # d×d, симметризуется при создании

    def __post_init__(self):
        object.__setattr__(self, "entries", _square_array(self.entries))

    @property
    def dim(self) -> int:
        return self.entries.shape[0]

    def frobenius_norm(self) -> float:
        return float(np.linalg.norm(self.entries))

    def __add__(self, other: "SymMatrix") -> "SymMatrix":
        return SymMatrix(self.entries + matrix_entries(other))

    def __sub__(self, other: "SymMatrix") -> "SymMatrix":
        return SymMatrix(self.entries - matrix_entries(other))

    def __mul__(self, scale: float) -> "SymMatrix":
        return SymMatrix(float(scale) * self.entries)

    __rmul__ = __mul__

    def __neg__(self) -> "SymMatrix":
        return SymMatrix(-self.entries)

    def __repr__(self) -> str:
        return f"SymMatrix(dim={self.dim})"

    @classmethod
    def zeros(cls, dim: int) -> "SymMatrix":
        return cls(np.zeros((dim, dim)))


@dataclass(frozen=True, eq=False)
class SpdMatrix:
    """
    Симметричная положительно определённая матрица: точка многообразия ℙ_d.

    При создании вход симметризуется, затем проверяется
    λ_min > 1e-12·max(1, λ_max). Спектральное разложение вычисляется
    при проверке и сохраняется.
    """
    entries: np.ndarray

    def __post_init__(self):
        arr = _square_array(self.entries)
        eigenvalues, eigenvectors = np.linalg.eigh(arr)
        if eigenvalues[0] <= pd_threshold(eigenvalues):
            raise NotPositiveDefiniteError(
                f"Минимальное собственное значение {eigenvalues[0]:.3e} не положительно"
            )
        object.__setattr__(self, "entries", arr)
        self.__dict__["eig"] = (eigenvalues, eigenvectors)

    @classmethod
    def from_spectrum(cls, eigenvalues: np.ndarray, eigenvectors: np.ndarray) -> "SpdMatrix":
        """Собрать матрицу из готового спектра без повторного разложения."""
        eigenvalues = np.asarray(eigenvalues, dtype=float)
        if np.any(eigenvalues <= 0) or not np.all(np.isfinite(eigenvalues)):
            raise NotPositiveDefiniteError("Спектр содержит неположительные значения")
        obj = object.__new__(cls)
        arr = _from_eig(eigenvalues, eigenvectors)
        arr.setflags(write=False)
        object.__setattr__(obj, "entries", arr)
        order = np.argsort(eigenvalues)
        obj.__dict__["eig"] = (eigenvalues[order], eigenvectors[:, order])
        return obj

    @classmethod
    def identity(cls, dim: int) -> "SpdMatrix":
        return cls.from_spectrum(np.ones(dim), np.eye(dim))

    @property
    def dim(self) -> int:
        return self.entries.shape[0]

    @property
    def eigenvalues(self) -> np.ndarray:
        return self.eig[0]

    @property
    def eigenvectors(self) -> np.ndarray:
        return self.eig[1]

    def apply(self, f: ScalarFunction) -> np.ndarray:
        """Q·diag(f(λ))·Qᵀ в виде массива."""
        lam, vecs = self.eig
        values = np.asarray(f(lam), dtype=float)
        if values.shape != lam.shape or not np.all(np.isfinite(values)):
            raise MrmfError("Скалярная функция не определена на спектре матрицы")
        return _from_eig(values, vecs)

    # Часто используемые функции базовой точки
    @cached_property
    def sqrt(self) -> np.ndarray:
        return self.apply(np.sqrt)

    @cached_property
    def inv_sqrt(self) -> np.ndarray:
        return self.apply(lambda lam: 1.0 / np.sqrt(lam))

    @cached_property
    def inverse(self) -> np.ndarray:
        return self.apply(np.reciprocal)

    @cached_property
    def log(self) -> np.ndarray:
        return self.apply(np.log)

    def min_eigenvalue(self) -> float:
        return float(self.eigenvalues[0])

    def condition_number(self) -> float:
        lam = self.eigenvalues
        return float(lam[-1] / lam[0])

    def __repr__(self) -> str:
        return f"SpdMatrix(dim={self.dim}, cond={self.condition_number():.3g})"


MatrixLike = Union[SymMatrix, SpdMatrix, np.ndarray]


def matrix_entries(matrix: MatrixLike) -> np.ndarray:
    if isinstance(matrix, (SymMatrix, SpdMatrix)):
        return matrix.entries
    return np.asarray(matrix, dtype=float)


def as_spd(matrix: MatrixLike) -> SpdMatrix:
    """Привести вход к SpdMatrix (с проверкой)."""
    if isinstance(matrix, SpdMatrix):
        return matrix
    return SpdMatrix(matrix_entries(matrix))


def _check_dims(*matrices: MatrixLike) -> int:
    dims = {matrix_entries(m).shape for m in matrices}
    if len(dims) != 1:
        raise DimensionMismatchError(f"Несовпадение размерностей: {sorted(dims)}")
    return next(iter(dims))[0]


def _spectral(arr: np.ndarray, f: ScalarFunction) -> np.ndarray:
    lam, vecs = np.linalg.eigh(symmetrize(arr))
    return _from_eig(np.asarray(f(lam), dtype=float), vecs)


# ----------------------------------------------------------------------
# Спектральное исчисление
# ----------------------------------------------------------------------

def spd_function(A: SpdMatrix, f: ScalarFunction) -> SymMatrix:
    """
    Применить скалярную функцию к SPD-матрице через спектральное разложение.

    Args:
        A: SPD-матрица
        f: Векторизованная функция, определённая на всех λ_i

    Returns:
        Q·diag(f(λ_i))·Qᵀ
    """
    return SymMatrix(A.apply(f))


def spd_sqrt(A: SpdMatrix) -> SpdMatrix:
    lam, vecs = A.eig
    return SpdMatrix.from_spectrum(np.sqrt(lam), vecs)


def spd_inv_sqrt(A: SpdMatrix) -> SpdMatrix:
    lam, vecs = A.eig
    return SpdMatrix.from_spectrum(1.0 / np.sqrt(lam), vecs)


def spd_power(A: SpdMatrix, p: float) -> SpdMatrix:
    lam, vecs = A.eig
    return SpdMatrix.from_spectrum(lam ** p, vecs)


def spd_inverse(A: SpdMatrix) -> SpdMatrix:
    lam, vecs = A.eig
    return SpdMatrix.from_spectrum(1.0 / lam, vecs)


def spd_log(A: SpdMatrix) -> SymMatrix:
    return SymMatrix(A.log)


def sym_exp(X: MatrixLike) -> SpdMatrix:
    """Матричная экспонента симметричной матрицы."""
    lam, vecs = np.linalg.eigh(symmetrize(matrix_entries(X)))
    return SpdMatrix.from_spectrum(np.exp(lam), vecs)


def sym_log(A: MatrixLike) -> SymMatrix:
    """Матричный логарифм (лог-евклидова арифметика)."""
    return spd_log(as_spd(A))


# ----------------------------------------------------------------------
# Аффинно-инвариантная геометрия
# ----------------------------------------------------------------------

def riemannian_log(A: SpdMatrix, B: SpdMatrix) -> SymMatrix:
    """
    Риманов логарифм log_A(B) = A^½ log(A^-½ B A^-½) A^½.

    Args:
        A: Базовая точка
        B: Целевая точка

    Returns:
        Касательный вектор в T_A ℙ_d
    """
    _check_dims(A, B)
    inner = A.inv_sqrt @ B.entries @ A.inv_sqrt
    return SymMatrix(A.sqrt @ _spectral(inner, np.log) @ A.sqrt)


def riemannian_exp(A: SpdMatrix, X: MatrixLike) -> SpdMatrix:
    """
    Риманова экспонента exp_A(X) = A^½ exp(A^-½ X A^-½) A^½.

    Args:
        A: Базовая точка
        X: Касательный вектор в T_A ℙ_d

    Returns:
        Точка многообразия
    """
    _check_dims(A, X)
    x = matrix_entries(X)
    if not np.any(x):
        return A
    inner = symmetrize(A.inv_sqrt @ x @ A.inv_sqrt)
    lam, vecs = np.linalg.eigh(inner)
    return SpdMatrix(A.sqrt @ _from_eig(np.exp(lam), vecs) @ A.sqrt)


def geodesic(A: SpdMatrix, B: SpdMatrix, t: float) -> SpdMatrix:
    """
    Точка геодезической A^½ (A^-½ B A^-½)^t A^½.

    Args:
        A: Начало (t = 0)
        B: Конец (t = 1)
        t: Параметр из [0, 1]
    """
    _check_dims(A, B)
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"Параметр геодезической вне [0, 1]: {t}")
    if t == 0.0:
        return A
    if t == 1.0:
        return B
    inner = A.inv_sqrt @ B.entries @ A.inv_sqrt
    return SpdMatrix(A.sqrt @ _spectral(inner, lambda lam: lam ** t) @ A.sqrt)


def generalized_eigenvalues(A: SpdMatrix, B: SpdMatrix) -> np.ndarray:
    """Собственные значения A⁻¹B (через симметричную форму A^-½ B A^-½)."""
    _check_dims(A, B)
    return np.linalg.eigvalsh(symmetrize(A.inv_sqrt @ B.entries @ A.inv_sqrt))


def intrinsic_distance(A: SpdMatrix, B: SpdMatrix) -> float:
    """Аффинно-инвариантное расстояние (Σ log² λ_i(A⁻¹B))^½."""
    lam = generalized_eigenvalues(A, B)
    return float(np.sqrt(np.sum(np.log(lam) ** 2)))


def congruence(Y: SpdMatrix, A: MatrixLike):
    """
    Конгруэнтное преобразование Y⁻¹ A Y⁻¹.

    Тип результата совпадает с типом A (SPD сохраняется).
    """
    _check_dims(Y, A)
    out = Y.inverse @ matrix_entries(A) @ Y.inverse
    if isinstance(A, SpdMatrix):
        return SpdMatrix(out)
    if isinstance(A, SymMatrix):
        return SymMatrix(out)
    return symmetrize(out)


def spd_inner(A: SpdMatrix, U: MatrixLike, V: MatrixLike) -> float:
    """Скалярное произведение в T_A ℙ_d: tr(U A⁻¹ V A⁻¹)."""
    _check_dims(A, U, V)
    a_inv = A.inverse
    return float(np.trace(matrix_entries(U) @ a_inv @ matrix_entries(V) @ a_inv))


# ----------------------------------------------------------------------
# Производные Далецкого-Крейна
# ----------------------------------------------------------------------

def divided_differences(eigenvalues: np.ndarray, f: ScalarFunction,
                        fprime: ScalarFunction, rtol: float = 1e-8) -> np.ndarray:
    """
    Матрица первых разделённых разностей f на спектре.

    F_ij = (f(λ_i) − f(λ_j))/(λ_i − λ_j), на почти совпадающих
    значениях берётся f'.
    """
    lam = np.asarray(eigenvalues, dtype=float)
    fl = np.asarray(f(lam), dtype=float)
    diff = lam[:, None] - lam[None, :]
    scale = np.maximum(np.abs(lam[:, None]), np.abs(lam[None, :]))
    close = np.abs(diff) <= rtol * np.maximum(scale, np.finfo(float).tiny)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = (fl[:, None] - fl[None, :]) / diff
    mid = 0.5 * (lam[:, None] + lam[None, :])
    out[close] = np.asarray(fprime(mid[close]), dtype=float)
    return out


def frechet_derivative_from_spectrum(eigenvalues: np.ndarray, eigenvectors: np.ndarray,
                                     f: ScalarFunction, fprime: ScalarFunction,
                                     direction: np.ndarray) -> np.ndarray:
    """Q (F ∘ QᵀEQ) Qᵀ для уже разложенной матрицы."""
    F = divided_differences(eigenvalues, f, fprime)
    core = eigenvectors.T @ direction @ eigenvectors
    return symmetrize(eigenvectors @ (F * core) @ eigenvectors.T)


def frechet_derivative(A: SpdMatrix, f: ScalarFunction, fprime: ScalarFunction,
                       E: MatrixLike) -> SymMatrix:
    """
    Производная Фреше матричной функции f в точке A по направлению E.

    Args:
        A: Точка дифференцирования
        f: Скалярная функция
        fprime: Её производная
        E: Симметричное направление

    Returns:
        Df(A)[E]
    """
    _check_dims(A, E)
    lam, vecs = A.eig
    return SymMatrix(frechet_derivative_from_spectrum(lam, vecs, f, fprime, matrix_entries(E)))


# ----------------------------------------------------------------------
# Произведение многообразий ℙ_d^N
# ----------------------------------------------------------------------

def product_distance(As: Sequence[SpdMatrix], Bs: Sequence[SpdMatrix]) -> float:
    """Расстояние на ℙ_d^N: корень из суммы квадратов по слотам."""
    if len(As) != len(Bs):
        raise DimensionMismatchError(f"Разное число слотов: {len(As)} и {len(Bs)}")
    return float(np.sqrt(sum(intrinsic_distance(a, b) ** 2 for a, b in zip(As, Bs))))


def product_geodesic(As: Sequence[SpdMatrix], Bs: Sequence[SpdMatrix],
                     t: float) -> Tuple[SpdMatrix, ...]:
    if len(As) != len(Bs):
        raise DimensionMismatchError(f"Разное число слотов: {len(As)} и {len(Bs)}")
    return tuple(geodesic(a, b, t) for a, b in zip(As, Bs))


def random_spd(dim: int, rng: np.random.Generator,
               condition: Optional[float] = None) -> SpdMatrix:
    """
    Случайная SPD-матрица.

    Без condition: уишартовская AᵀA/d + I/d; с condition: случайный
    ортогональный базис и логарифмически равномерный спектр [1, condition].
    """
    if condition is None:
        a = rng.standard_normal((dim, dim))
        return SpdMatrix((a.T @ a + np.eye(dim)) / dim)
    q, r = np.linalg.qr(rng.standard_normal((dim, dim)))
    q = q * np.sign(np.diag(r))
    lam = np.exp(rng.uniform(0.0, np.log(condition), size=dim))
    return SpdMatrix.from_spectrum(lam, q)
