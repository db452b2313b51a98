"""
Координаты касательных пространств и линейные операторы на ℍ_d^N.

Кодировка симметричной матрицы: сначала диагональ, затем строго верхний
треугольник построчно, умноженный на √2. Кодировка ортонормальна:
⟨X, Y⟩_F = flat(X)·flat(Y).
"""

import logging
from dataclasses import dataclass
from functools import lru_cache
from typing import Any, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve, solve

from errors import DimensionMismatchError, SingularOperatorError, StructureError
from spd_core import MatrixLike, SpdMatrix, SymMatrix, matrix_entries, symmetrize

logger = logging.getLogger(__name__)

SQRT2 = np.sqrt(2.0)
MAX_CONDITION = 1e14        # Порог вырожденности для regularized_inverse
DEFAULT_INVERSE_EPS = 1e-8  # Относительный сдвиг для оценённых Γ̂


def tangent_size(dim: int) -> int:
    """q = d(d+1)/2."""
    return dim * (dim + 1) // 2


def dim_from_tangent_size(q: int) -> int:
    dim = int(round((np.sqrt(8 * q + 1) - 1) / 2))
    if tangent_size(dim) != q:
        raise DimensionMismatchError(f"{q} не является треугольным числом")
    return dim


@lru_cache(maxsize=None)
def _upper_indices(dim: int) -> Tuple[np.ndarray, np.ndarray]:
    return np.triu_indices(dim, k=1)


@lru_cache(maxsize=None)
def symmetric_basis(dim: int) -> np.ndarray:
    """Ортонормальный базис ℍ_d, массив (q, d, d); flat(basis[k]) = e_k."""
    q = tangent_size(dim)
    basis = np.zeros((q, dim, dim))
    for i in range(dim):
        basis[i, i, i] = 1.0
    rows, cols = _upper_indices(dim)
    for k, (i, j) in enumerate(zip(rows, cols), start=dim):
        basis[k, i, j] = basis[k, j, i] = 1.0 / SQRT2
    basis.setflags(write=False)
    return basis


def flat_array(X: np.ndarray) -> np.ndarray:
    """Кодировка одной матрицы или пачки (..., d, d) -> (..., q)."""
    dim = X.shape[-1]
    rows, cols = _upper_indices(dim)
    diag = np.diagonal(X, axis1=-2, axis2=-1)
    upper = SQRT2 * X[..., rows, cols]
    return np.concatenate([diag, upper], axis=-1)


def unflat_array(v: np.ndarray, dim: int) -> np.ndarray:
    """Обратная кодировка (..., q) -> (..., d, d)."""
    v = np.asarray(v, dtype=float)
    if v.shape[-1] != tangent_size(dim):
        raise DimensionMismatchError(f"Длина {v.shape[-1]} не равна q = {tangent_size(dim)}")
    out = np.zeros(v.shape[:-1] + (dim, dim))
    idx = np.arange(dim)
    out[..., idx, idx] = v[..., :dim]
    rows, cols = _upper_indices(dim)
    off = v[..., dim:] / SQRT2
    out[..., rows, cols] = off
    out[..., cols, rows] = off
    return out


def sym_to_flat(X: MatrixLike) -> np.ndarray:
    """
    Ортонормальная кодировка симметричной матрицы.

    Args:
        X: Симметричная матрица d×d

    Returns:
        Вектор длины q = d(d+1)/2
    """
    return flat_array(matrix_entries(X))


def flat_to_sym(v: np.ndarray, dim: int) -> SymMatrix:
    return SymMatrix(unflat_array(v, dim))


@dataclass(frozen=True, eq=False)
class TangentStack:
    """Упорядоченный набор N симметричных матриц одной размерности."""
    parts: Tuple[SymMatrix, ...]

    def __post_init__(self):
        parts = tuple(p if isinstance(p, SymMatrix) else SymMatrix(p) for p in self.parts)
        if not parts:
            raise DimensionMismatchError("Пустой стек")
        if len({p.dim for p in parts}) != 1:
            raise DimensionMismatchError("Слоты стека имеют разную размерность")
        object.__setattr__(self, "parts", parts)

    @property
    def dim(self) -> int:
        return self.parts[0].dim

    @property
    def count(self) -> int:
        return len(self.parts)

    def to_flat(self) -> np.ndarray:
        return stack_to_flat(self)

    @classmethod
    def from_flat(cls, v: np.ndarray, dim: int) -> "TangentStack":
        return flat_to_stack(v, dim)

    def __len__(self) -> int:
        return self.count

    def __iter__(self):
        return iter(self.parts)

    def __getitem__(self, index: int) -> SymMatrix:
        return self.parts[index]


def stack_to_flat(stack: TangentStack) -> np.ndarray:
    return np.concatenate([sym_to_flat(p) for p in stack.parts])


def flat_to_stack(v: np.ndarray, dim: int) -> TangentStack:
    v = np.asarray(v, dtype=float)
    q = tangent_size(dim)
    if v.ndim != 1 or v.size % q != 0 or v.size == 0:
        raise DimensionMismatchError(f"Длина {v.size} не кратна q = {q}")
    return TangentStack(tuple(SymMatrix(m) for m in unflat_array(v.reshape(-1, q), dim)))


@dataclass(frozen=True, eq=False)
class TangentOperator:
    """
    Линейный оператор на ℍ_d^N в ортонормальной кодировке.

    Матрица (N_r·q)×(N_c·q); для квадратных операторов N_r = N_c = N.
    structure: прикреплённая структура групп (FidelityStructure),
    межгрупповые блоки при этом обнулены.
    """
    dim: int
    matrix: np.ndarray
    structure: Optional[Any] = None

    def __post_init__(self):
        arr = np.array(self.matrix, dtype=float)
        q = tangent_size(self.dim)
        if arr.ndim != 2 or arr.shape[0] % q or arr.shape[1] % q or arr.size == 0:
            raise DimensionMismatchError(
                f"Форма {arr.shape} не согласована с q = {q}"
            )
        arr.setflags(write=False)
        object.__setattr__(self, "matrix", arr)

    @property
    def q(self) -> int:
        return tangent_size(self.dim)

    @property
    def row_slots(self) -> int:
        return self.matrix.shape[0] // self.q

    @property
    def col_slots(self) -> int:
        return self.matrix.shape[1] // self.q

    @property
    def count(self) -> int:
        """N для квадратного оператора."""
        return self.row_slots

    @property
    def is_square(self) -> bool:
        return self.row_slots == self.col_slots

    def is_symmetric(self, rtol: float = 1e-10) -> bool:
        if not self.is_square:
            return False
        scale = max(1.0, float(np.max(np.abs(self.matrix))))
        return float(np.max(np.abs(self.matrix - self.matrix.T))) <= rtol * scale

    def transpose(self) -> "TangentOperator":
        return TangentOperator(self.dim, self.matrix.T, self.structure)

    def apply(self, stack: TangentStack) -> TangentStack:
        if stack.dim != self.dim or stack.count != self.col_slots:
            raise DimensionMismatchError("Стек не согласован с оператором")
        return flat_to_stack(self.matrix @ stack.to_flat(), self.dim)

    def __matmul__(self, other: "TangentOperator") -> "TangentOperator":
        if not isinstance(other, TangentOperator):
            return NotImplemented
        if other.dim != self.dim or other.row_slots != self.col_slots:
            raise DimensionMismatchError("Несогласованные операторы в произведении")
        return TangentOperator(self.dim, self.matrix @ other.matrix)

    def trace(self) -> float:
        return float(np.trace(self.matrix))

    def attach_structure(self, structure) -> "TangentOperator":
        """
        Обнулить межгрупповые блоки и прикрепить структуру.

        Args:
            structure: Объект с атрибутом slot_group (номер группы каждого слота)
        """
        groups = tuple(structure.slot_group)
        if not self.is_square or len(groups) != self.count:
            raise StructureError(
                f"Структура на {len(groups)} слотов не подходит оператору на {self.count}"
            )
        q = self.q
        mask = np.repeat(np.array(groups), q)
        zeroed = np.where(mask[:, None] == mask[None, :], self.matrix, 0.0)
        return TangentOperator(self.dim, zeroed, structure)

    @classmethod
    def identity(cls, dim: int, count: int) -> "TangentOperator":
        return cls(dim, np.eye(count * tangent_size(dim)))

    @classmethod
    def zeros(cls, dim: int, count: int) -> "TangentOperator":
        n = count * tangent_size(dim)
        return cls(dim, np.zeros((n, n)))


def build_congruence_operator(Ys: Sequence[SpdMatrix]) -> TangentOperator:
    """
    Оператор G_Y: (C_1, …, C_N) ↦ (Y_1⁻¹C_1Y_1⁻¹, …, Y_N⁻¹C_NY_N⁻¹).

    Args:
        Ys: N SPD-матриц одной размерности

    Returns:
        Блочно-диагональный оператор с N блоками q×q
    """
    if not Ys:
        raise DimensionMismatchError("Пустой список Y")
    dims = {y.dim for y in Ys}
    if len(dims) != 1:
        raise DimensionMismatchError(f"Разные размерности Y: {sorted(dims)}")
    dim = dims.pop()
    q = tangent_size(dim)
    basis = symmetric_basis(dim)
    out = np.zeros((len(Ys) * q, len(Ys) * q))
    for n, y in enumerate(Ys):
        images = y.inverse @ basis @ y.inverse          # (q, d, d)
        block = flat_array(images).T                   # столбцы = образы базиса
        out[n * q:(n + 1) * q, n * q:(n + 1) * q] = 0.5 * (block + block.T)
    return TangentOperator(dim, out)


def regularized_inverse(G: TangentOperator, eps: float = DEFAULT_INVERSE_EPS) -> TangentOperator:
    """
    Обратный оператор со сдвигом (G + eps·tr(G)/(Nq)·I)⁻¹.

    Args:
        G: Симметричный оператор
        eps: Относительный сдвиг (≥ 0)

    Returns:
        Симметричный обратный оператор

    Raises:
        SingularOperatorError: оценка обусловленности превышает 1e14
    """
    if eps < 0:
        raise ValueError(f"Отрицательный сдвиг eps = {eps}")
    if not G.is_symmetric():
        raise DimensionMismatchError("regularized_inverse требует симметричный оператор")
    n = G.matrix.shape[0]
    shift = eps * G.trace() / n
    shifted = symmetrize(G.matrix) + shift * np.eye(n)
    spectrum = np.abs(np.linalg.eigvalsh(shifted))
    smallest = float(np.min(spectrum))
    condition = np.inf if smallest == 0.0 else float(np.max(spectrum)) / smallest
    if condition > MAX_CONDITION:
        raise SingularOperatorError(f"Оператор вырожден: cond ≈ {condition:.3e}")
    try:
        inverse = cho_solve(cho_factor(shifted, lower=True), np.eye(n))
    except LinAlgError:
        logger.debug("Разложение Холецкого не удалось, используется симметричное решение")
        inverse = solve(shifted, np.eye(n), assume_a="sym")
    return TangentOperator(G.dim, symmetrize(inverse), G.structure)


def _slot_indices(slots: Iterable[int], limit: int, q: int) -> np.ndarray:
    slots = list(slots)
    for s in slots:
        if not 0 <= s < limit:
            raise IndexError(f"Слот {s} вне диапазона [0, {limit})")
    if not slots:
        return np.zeros(0, dtype=int)
    return np.concatenate([np.arange(s * q, (s + 1) * q) for s in slots])


def extract_block(G: TangentOperator, rows: Sequence[int], cols: Sequence[int]) -> TangentOperator:
    """
    Подоператор над выбранными слотами (блоки размера q).

    Args:
        G: Исходный оператор
        rows: Слоты-строки
        cols: Слоты-столбцы
    """
    q = G.q
    r = _slot_indices(rows, G.row_slots, q)
    c = _slot_indices(cols, G.col_slots, q)
    if r.size == 0 or c.size == 0:
        raise IndexError("Пустой набор слотов")
    return TangentOperator(G.dim, G.matrix[np.ix_(r, c)])


def outer_product_operator(vectors: np.ndarray, dim: int) -> TangentOperator:
    """(1/P) Σ_p v_p v_pᵀ для строк массива vectors (P, Nq)."""
    vectors = np.atleast_2d(np.asarray(vectors, dtype=float))
    return TangentOperator(dim, symmetrize(vectors.T @ vectors / vectors.shape[0]))


def block_diagonal(blocks: List[TangentOperator]) -> TangentOperator:
    """Собрать блочно-диагональный оператор из квадратных блоков."""
    dims = {b.dim for b in blocks}
    if len(dims) != 1:
        raise DimensionMismatchError("Блоки разной размерности")
    sizes = [b.matrix.shape[0] for b in blocks]
    out = np.zeros((sum(sizes), sum(sizes)))
    start = 0
    for b, size in zip(blocks, sizes):
        out[start:start + size, start:start + size] = b.matrix
        start += size
    return TangentOperator(dims.pop(), out)
