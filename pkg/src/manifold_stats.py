"""
Внутренняя статистика на ℙ_d и ℙ_d^N.

Среднее Фреше (итерация Кархера), риманова дисперсия, оценка оператора
ковариации по пилотным выборкам и расстояние Махаланобиса.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Sequence, Tuple

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from errors import ConvergenceError, DimensionMismatchError, StructureError
from spd_core import (
    SpdMatrix, intrinsic_distance, riemannian_exp, spd_inner, symmetrize,
)
from tangent_algebra import (
    TangentOperator, build_congruence_operator, flat_array, flat_to_stack,
    outer_product_operator, symmetric_basis, tangent_size,
)

logger = logging.getLogger(__name__)

# Параметры итерации Кархера
KARCHER_TOL = 1e-10
KARCHER_MAX_ITER = 200

DEFAULT_PILOT_COUNT = 1000


@dataclass(frozen=True)
class FidelityStructure:
    """
    Структура групп точностей.

    Группы F^1, …, F^K — подмножества {0, …, L}; слоты стека идут
    в порядке групп, внутри группы по возрастанию номера точности.
    """
    L: int                                  # Число низких точностей
    groups: Tuple[Tuple[int, ...], ...]     # F^k
    slot_fidelity: Tuple[int, ...] = field(init=False)
    slot_group: Tuple[int, ...] = field(init=False)

    def __post_init__(self):
        if self.L < 0:
            raise StructureError(f"Отрицательное L = {self.L}")
        groups = tuple(tuple(sorted(int(f) for f in g)) for g in self.groups)
        if not groups:
            raise StructureError("Нет ни одной группы")
        for k, g in enumerate(groups):
            if not g:
                raise StructureError(f"Группа {k} пуста")
            if len(set(g)) != len(g):
                raise StructureError(f"Повтор точности внутри группы {k}: {g}")
            if g[0] < 0 or g[-1] > self.L:
                raise StructureError(f"Группа {k} выходит за пределы 0..{self.L}: {g}")
        present = {f for g in groups for f in g}
        if 0 not in present:
            raise StructureError("Высокая точность (0) не входит ни в одну группу")
        missing = set(range(self.L + 1)) - present
        if missing:
            raise StructureError(f"Точности без данных: {sorted(missing)}")
        object.__setattr__(self, "groups", groups)
        object.__setattr__(self, "slot_fidelity", tuple(f for g in groups for f in g))
        object.__setattr__(
            self, "slot_group", tuple(k for k, g in enumerate(groups) for _ in g)
        )

    @property
    def K(self) -> int:
        return len(self.groups)

    @property
    def N(self) -> int:
        return len(self.slot_fidelity)

    @property
    def fidelities(self) -> Tuple[int, ...]:
        return tuple(range(self.L + 1))

    def slots_of_fidelity(self, fidelity: int) -> List[int]:
        return [n for n, f in enumerate(self.slot_fidelity) if f == fidelity]

    def slots_of_group(self, group: int) -> List[int]:
        return [n for n, k in enumerate(self.slot_group) if k == group]

    def reference_slot(self, fidelity: int) -> int:
        """Первый слот с данной точностью."""
        return self.slots_of_fidelity(fidelity)[0]

    def to_dict(self) -> Dict:
        return {"L": self.L, "groups": [list(g) for g in self.groups]}

    @classmethod
    def from_dict(cls, data: Dict) -> "FidelityStructure":
        try:
            return cls(L=int(data["L"]), groups=tuple(tuple(g) for g in data["groups"]))
        except (KeyError, TypeError) as e:
            raise StructureError(f"Некорректное описание структуры: {e}") from e

    @classmethod
    def running_example(cls) -> "FidelityStructure":
        """(S_hi, S¹_lo) в одной группе, S²_lo в отдельной."""
        return cls(L=1, groups=((0, 1), (1,)))

    @classmethod
    def coupled_pair(cls) -> "FidelityStructure":
        """Только связанная пара (S_hi, S_lo)."""
        return cls(L=1, groups=((0, 1),))

    @classmethod
    def single(cls) -> "FidelityStructure":
        return cls(L=0, groups=((0,),))


@dataclass(frozen=True, eq=False)
class PilotEnsemble:
    """Пилотные реализации стека данных."""
    structure: FidelityStructure
    draws: Tuple[Tuple[SpdMatrix, ...], ...]

    def __post_init__(self):
        draws = tuple(tuple(d) for d in self.draws)
        if not draws:
            raise DimensionMismatchError("Пустой пилотный ансамбль")
        dims = {m.dim for d in draws for m in d}
        if len(dims) != 1:
            raise DimensionMismatchError(f"Разные размерности в пилотах: {sorted(dims)}")
        for p, d in enumerate(draws):
            if len(d) != self.structure.N:
                raise StructureError(
                    f"Пилот {p}: {len(d)} слотов вместо {self.structure.N}"
                )
        object.__setattr__(self, "draws", draws)

    @property
    def dim(self) -> int:
        return self.draws[0][0].dim

    @property
    def size(self) -> int:
        return len(self.draws)

    def slot_samples(self, slot: int) -> List[SpdMatrix]:
        return [d[slot] for d in self.draws]


# ----------------------------------------------------------------------
# Пакетные логарифмы
# ----------------------------------------------------------------------

def _stack_entries(samples: Sequence[SpdMatrix]) -> np.ndarray:
    return np.stack([s.entries for s in samples])


def batched_log_at(base: SpdMatrix, samples: np.ndarray) -> np.ndarray:
    """log_base(S_p) для пачки (P, d, d)."""
    if samples.shape[-1] != base.dim:
        raise DimensionMismatchError("Размерность выборки не совпадает с базовой точкой")
    inner = base.inv_sqrt @ samples @ base.inv_sqrt
    inner = 0.5 * (inner + np.swapaxes(inner, -1, -2))
    lam, vecs = np.linalg.eigh(inner)
    logs = (vecs * np.log(lam)[..., None, :]) @ np.swapaxes(vecs, -1, -2)
    out = base.sqrt @ logs @ base.sqrt
    return 0.5 * (out + np.swapaxes(out, -1, -2))


# ----------------------------------------------------------------------
# Среднее Фреше
# ----------------------------------------------------------------------

def frechet_mean(samples: Sequence[SpdMatrix], tol: float = KARCHER_TOL,
                 max_iter: int = KARCHER_MAX_ITER) -> SpdMatrix:
    """
    Среднее Фреше итерацией Кархера Σ ← exp_Σ((1/P) Σ_p log_Σ S_p).

    Args:
        samples: Непустой список SPD-матриц
        tol: Порог ‖средний логарифм‖_F ≤ tol·‖Σ‖_F
        max_iter: Максимум итераций

    Returns:
        Среднее Фреше

    Raises:
        ConvergenceError: итерация не сошлась за max_iter шагов
    """
    if not samples:
        raise DimensionMismatchError("Пустая выборка для среднего Фреше")
    if len({s.dim for s in samples}) != 1:
        raise DimensionMismatchError("Выборка содержит матрицы разной размерности")
    if len(samples) == 1:
        return samples[0]

    stacked = _stack_entries(samples)
    mean = samples[0]
    residual = np.inf
    for iteration in range(1, max_iter + 1):
        step = batched_log_at(mean, stacked).mean(axis=0)
        residual = float(np.linalg.norm(step))
        if residual <= tol * float(np.linalg.norm(mean.entries)):
            logger.debug(f"Кархер сошёлся за {iteration} итераций, невязка {residual:.2e}")
            return mean
        mean = riemannian_exp(mean, symmetrize(step))

    raise ConvergenceError(
        f"Среднее Фреше не сошлось за {max_iter} итераций (невязка {residual:.3e})",
        residual=residual, iterations=max_iter,
    )


def riemannian_variance(samples: Sequence[SpdMatrix], mean: SpdMatrix) -> float:
    """Эмпирическая дисперсия (1/P) Σ_p d²(Σ, S_p); равна следу Γ_S."""
    return float(np.mean([intrinsic_distance(mean, s) ** 2 for s in samples]))


def product_frechet_mean(draws: Sequence[Sequence[SpdMatrix]],
                         tol: float = KARCHER_TOL,
                         max_iter: int = KARCHER_MAX_ITER) -> Tuple[SpdMatrix, ...]:
    """Среднее Фреше на ℙ_d^N (по слотам)."""
    count = {len(d) for d in draws}
    if len(count) != 1:
        raise DimensionMismatchError("Реализации имеют разное число слотов")
    return tuple(
        frechet_mean([d[n] for d in draws], tol, max_iter) for n in range(count.pop())
    )


def pooled_fidelity_means(pilot: PilotEnsemble, tol: float = KARCHER_TOL,
                          max_iter: int = KARCHER_MAX_ITER) -> List[SpdMatrix]:
    """Средние по точностям: все слоты с одной меткой объединяются."""
    means = []
    for fidelity in pilot.structure.fidelities:
        pooled = [
            draw[n] for draw in pilot.draws
            for n in pilot.structure.slots_of_fidelity(fidelity)
        ]
        means.append(frechet_mean(pooled, tol, max_iter))
        logger.debug(f"Среднее точности {fidelity} по {len(pooled)} матрицам")
    return means


# ----------------------------------------------------------------------
# Оператор ковариации
# ----------------------------------------------------------------------

def tangent_vectors(pilot: PilotEnsemble, means: Sequence[SpdMatrix]) -> np.ndarray:
    """Массив (P, Nq) кодировок log_{Σ_f(n)} S_n по всем пилотам."""
    structure = pilot.structure
    if len(means) != structure.L + 1:
        raise StructureError(f"Ожидалось {structure.L + 1} средних, получено {len(means)}")
    blocks = []
    for n, fidelity in enumerate(structure.slot_fidelity):
        logs = batched_log_at(means[fidelity], _stack_entries(pilot.slot_samples(n)))
        blocks.append(flat_array(logs))
    return np.concatenate(blocks, axis=1)


def estimate_covariance_operator(pilot: PilotEnsemble, means: Sequence[SpdMatrix],
                                 zero_cross_groups: bool = True) -> TangentOperator:
    """
    Оценка Γ̂ = (1/P) Σ_p v_p v_pᵀ в невзвешенной форме.

    Args:
        pilot: Пилотный ансамбль
        means: Средние Σ_0, …, Σ_L
        zero_cross_groups: Обнулить блоки между независимыми группами

    Returns:
        Симметричный неотрицательно определённый оператор
    """
    means = list(means)
    if {m.dim for m in means} != {pilot.dim}:
        raise DimensionMismatchError("Размерность средних не совпадает с пилотами")
    gamma = outer_product_operator(tangent_vectors(pilot, means), pilot.dim)
    if zero_cross_groups:
        gamma = gamma.attach_structure(pilot.structure)
    logger.info(f"Оценён оператор ковариации: P={pilot.size}, N={pilot.structure.N}, "
                f"след={gamma.trace():.4g}")
    return gamma


def weighted_covariance_operator(pilot: PilotEnsemble,
                                 means: Sequence[SpdMatrix]) -> TangentOperator:
    """
    Взвешенная форма Γ_S = E[log_Σ S ⊗_Σ log_Σ S].

    Столбец k — (1/P) Σ_p u_p ⟨u_p, E_k⟩_Σ, скалярное произведение
    берётся в метрике точки Σ_f(n) каждого слота.
    """
    structure = pilot.structure
    dim = pilot.dim
    q = tangent_size(dim)
    basis = symmetric_basis(dim)
    vectors = tangent_vectors(pilot, means)
    sigmas = [means[f] for f in structure.slot_fidelity]
    total = np.zeros((structure.N * q, structure.N * q))
    for v in vectors:
        parts = flat_to_stack(v, dim)
        weights = np.array([
            spd_inner(sigma, parts[n], basis[k])
            for n, sigma in enumerate(sigmas) for k in range(q)
        ])
        total += np.outer(v, weights)
    return TangentOperator(dim, total / len(vectors))


# ----------------------------------------------------------------------
# Расстояние Махаланобиса
# ----------------------------------------------------------------------

def tangent_residual(data: Sequence[SpdMatrix], sigma: Sequence[SpdMatrix]) -> np.ndarray:
    """Кодировка стека (log_{Σ_n} S_n)_n."""
    if len(data) != len(sigma):
        raise DimensionMismatchError(f"{len(data)} слотов данных и {len(sigma)} средних")
    return np.concatenate([
        flat_array(batched_log_at(s, d.entries[None])[0]) for d, s in zip(data, sigma)
    ])


def mahalanobis_sq(data: Sequence[SpdMatrix], sigma: Sequence[SpdMatrix],
                   gamma_inv: TangentOperator) -> float:
    """
    Квадрат расстояния Махаланобиса vᵀ Γ⁻¹ v.

    Args:
        data: N SPD-матриц (реализация стека)
        sigma: Кандидатные средние по слотам
        gamma_inv: Обратный оператор ковариации

    Returns:
        Неотрицательное число
    """
    v = tangent_residual(data, sigma)
    if gamma_inv.matrix.shape != (v.size, v.size):
        raise DimensionMismatchError(
            f"Оператор {gamma_inv.matrix.shape} не согласован с вектором длины {v.size}"
        )
    return float(max(v @ gamma_inv.matrix @ v, 0.0))


def weighted_mahalanobis_sq(data: Sequence[SpdMatrix], sigma: Sequence[SpdMatrix],
                            gamma_unweighted: TangentOperator) -> float:
    """
    ⟨log_Σ S, Γ_S⁻¹ log_Σ S⟩_Σ во взвешенной геометрии.

    Γ_S = Γ_{S,I}·G_Σ, скалярное произведение берётся слотами через
    tr(U Σ⁻¹ V Σ⁻¹).
    """
    dim = sigma[0].dim
    v = tangent_residual(data, sigma)
    weighted = gamma_unweighted.matrix @ build_congruence_operator(list(sigma)).matrix
    w = np.linalg.solve(weighted, v)
    logs = flat_to_stack(v, dim)
    images = flat_to_stack(w, dim)
    return float(sum(
        spd_inner(s, u, x) for s, u, x in zip(sigma, logs.parts, images.parts)
    ))


def tangent_log_likelihood(data: Sequence[SpdMatrix], sigma: Sequence[SpdMatrix],
                           gamma: TangentOperator) -> float:
    """Отрицательное логарифмическое правдоподобие 𝓔 = log_Σ S при 𝓔 ∼ N(0, Γ)."""
    v = tangent_residual(data, sigma)
    factor = cho_factor(symmetrize(gamma.matrix), lower=True)
    quad = float(v @ cho_solve(factor, v))
    logdet = 2.0 * float(np.sum(np.log(np.diag(factor[0]))))
    return 0.5 * (quad + logdet + v.size * np.log(2.0 * np.pi))
