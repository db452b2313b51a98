"""
Оценщики ковариационных матриц.

Выборочная ковариация (SCM), евклидова (EMF) и лог-евклидова (LEMF)
управляющие переменные, а также регрессионный оценщик MRMF на многообразии
SPD: минимизация штрафованного расстояния Махаланобиса по квадратным
корням B_ℓ (Σ_ℓ = B_ℓ²) градиентным спуском с правилом Армихо.
"""

import logging
import math
from concurrent.futures import Executor
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.linalg import solve

from errors import (
    ConfigError, DegenerateGainError, DimensionMismatchError, IndefiniteInputError,
    InsufficientSamplesError, MrmfError, NotPositiveDefiniteError, StructureError,
)
from manifold_stats import FidelityStructure, tangent_residual
from random_streams import Purpose, substream
from spd_core import (
    MatrixLike, SpdMatrix, SymMatrix, as_spd, congruence, frechet_derivative_from_spectrum,
    matrix_entries, pd_threshold, spd_inverse, spd_sqrt, sym_exp, symmetrize,
)
from tangent_algebra import (
    TangentOperator, TangentStack, build_congruence_operator, extract_block, flat_array,
    sym_to_flat, tangent_size, unflat_array,
)

logger = logging.getLogger(__name__)

GRADIENT_MODES = ("finite_difference", "analytic")


# ----------------------------------------------------------------------
# Выборочная ковариация
# ----------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class ScmResult:
    """Выборочная ковариация с флагом положительной определённости."""
    matrix: np.ndarray
    sample_count: int
    min_eig: float
    is_spd: bool

    def as_spd(self) -> SpdMatrix:
        if not self.is_spd:
            raise IndefiniteInputError(
                f"SCM по {self.sample_count} выборкам вырождена (λ_min = {self.min_eig:.3e})"
            )
        return SpdMatrix(self.matrix)

    def as_sym(self) -> SymMatrix:
        return SymMatrix(self.matrix)


def definiteness(matrix: np.ndarray) -> Tuple[float, bool]:
    """(λ_min, признак SPD по порогу ε_pd)."""
    lam = np.linalg.eigvalsh(symmetrize(matrix))
    return float(lam[0]), bool(lam[0] > pd_threshold(np.abs(lam)))


def scm(samples) -> ScmResult:
    """
    Несмещённая выборочная ковариация (1/(M−1)) Σ (x − x̄)(x − x̄)ᵀ.

    Args:
        samples: Массив (M, d) или одномерный массив скаляров

    Returns:
        ScmResult с признаком положительной определённости
    """
    x = np.asarray(samples, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if x.ndim != 2:
        raise DimensionMismatchError(f"Ожидался массив (M, d), получено {x.shape}")
    m = x.shape[0]
    if m < 2:
        raise InsufficientSamplesError(f"Для SCM нужно не меньше 2 выборок, получено {m}")
    centered = x - x.mean(axis=0)
    matrix = symmetrize(centered.T @ centered / (m - 1))
    min_eig, is_spd = definiteness(matrix)
    matrix.setflags(write=False)
    return ScmResult(matrix, m, min_eig, is_spd)


def _array(value: Union[MatrixLike, ScmResult]) -> np.ndarray:
    if isinstance(value, ScmResult):
        return value.matrix
    return matrix_entries(value)


def _spd(value: Union[MatrixLike, ScmResult]) -> SpdMatrix:
    if isinstance(value, ScmResult):
        return value.as_spd()
    try:
        return as_spd(value)
    except NotPositiveDefiniteError as e:
        raise IndefiniteInputError(str(e)) from e


# ----------------------------------------------------------------------
# Управляющие переменные EMF / LEMF
# ----------------------------------------------------------------------

@dataclass(frozen=True)
class ScalarGain:
    """Скалярный коэффициент α = tr Ψ_lo,hi / tr Ψ_lo."""
    alpha: float

    @classmethod
    def from_traces(cls, cross_trace: float, auto_trace: float) -> "ScalarGain":
        if auto_trace == 0.0:
            raise DegenerateGainError("tr Ψ_lo = 0: коэффициент не определён")
        return cls(float(cross_trace) / float(auto_trace))

    def apply(self, delta: np.ndarray) -> np.ndarray:
        return self.alpha * delta


@dataclass(frozen=True, eq=False)
class OperatorGain:
    """
    Операторный коэффициент Ψ_lo,hi Ψ_lo⁻¹ (N = 1).

    cross: Cov(S_hi, S_lo) как оператор ℍ_d → ℍ_d
    auto: Cov(S_lo)
    """
    cross: TangentOperator
    auto: TangentOperator

    def __post_init__(self):
        if self.cross.matrix.shape != self.auto.matrix.shape or self.auto.count != 1:
            raise DimensionMismatchError("Операторный коэффициент задаётся блоками q×q")

    def apply(self, delta: np.ndarray) -> np.ndarray:
        if self.auto.trace() == 0.0:
            raise DegenerateGainError("tr Ψ_lo = 0: коэффициент не определён")
        x = solve(self.auto.matrix, sym_to_flat(delta), assume_a="sym")
        return unflat_array(self.cross.matrix @ x, self.auto.dim)


Gain = Union[ScalarGain, OperatorGain]


@dataclass(frozen=True, eq=False)
class MultifidelityEstimate:
    """Результат EMF: симметричная, возможно знаконеопределённая матрица."""
    matrix: np.ndarray
    min_eig: float
    is_spd: bool

    def as_spd(self) -> SpdMatrix:
        if not self.is_spd:
            raise IndefiniteInputError(
                f"Оценка знаконеопределена (λ_min = {self.min_eig:.3e})"
            )
        return SpdMatrix(self.matrix)


def emf(s_hi, s_lo, s_bar_lo, gain: Gain) -> MultifidelityEstimate:
    """
    Евклидова управляющая переменная S_hi + α(S̄_lo − S_lo).

    Args:
        s_hi: SCM высокой точности
        s_lo: Связанная SCM низкой точности
        s_bar_lo: Объединённая SCM низкой точности
        gain: Скалярный или операторный коэффициент

    Returns:
        Оценка с признаком определённости (знаконеопределённость не исправляется)
    """
    hi, lo, bar = _array(s_hi), _array(s_lo), _array(s_bar_lo)
    if not hi.shape == lo.shape == bar.shape:
        raise DimensionMismatchError("Несогласованные размерности входов EMF")
    matrix = symmetrize(hi + gain.apply(symmetrize(bar - lo)))
    min_eig, is_spd = definiteness(matrix)
    if not is_spd:
        logger.debug(f"EMF: знаконеопределённая оценка, λ_min = {min_eig:.3e}")
    matrix.setflags(write=False)
    return MultifidelityEstimate(matrix, min_eig, is_spd)


def lemf(s_hi, s_lo, s_bar_lo, gain: Gain) -> SpdMatrix:
    """Лог-евклидова управляющая переменная exp(log S_hi + α(log S̄_lo − log S_lo))."""
    hi, lo, bar = _spd(s_hi), _spd(s_lo), _spd(s_bar_lo)
    if not hi.dim == lo.dim == bar.dim:
        raise DimensionMismatchError("Несогласованные размерности входов LEMF")
    return sym_exp(hi.log + gain.apply(symmetrize(bar.log - lo.log)))


def _gain_moments(hi: Sequence, lo: Sequence, lo_ref: Optional[Sequence],
                  log_euclidean: bool) -> Tuple[np.ndarray, np.ndarray]:
    if len(hi) != len(lo) or (lo_ref is not None and len(lo_ref) != len(lo)):
        raise DimensionMismatchError("Пилотные выборки разной длины")
    if len(hi) < 2:
        raise InsufficientSamplesError("Для оценки коэффициентов нужно не меньше 2 пилотов")

    def transform(values):
        if log_euclidean:
            return np.stack([_spd(v).log for v in values])
        return np.stack([_array(v) for v in values])

    h = transform(hi)
    delta = transform(lo)
    if lo_ref is not None:
        delta = delta - transform(lo_ref)
    return flat_array(h), flat_array(delta)


def scalar_gain_from_pilot(hi: Sequence, lo: Sequence, lo_ref: Optional[Sequence] = None,
                           log_euclidean: bool = False) -> ScalarGain:
    """
    Скалярный коэффициент по пилотам: tr Cov(S_hi, Δ) / tr Var(Δ), Δ = S_lo − S̄_lo.

    Args:
        hi: Пилотные S_hi
        lo: Пилотные связанные S_lo
        lo_ref: Пилотные S̄_lo (None: средняя считается известной)
        log_euclidean: Считать моменты матричных логарифмов (Φ вместо Ψ)
    """
    h, d = _gain_moments(hi, lo, lo_ref, log_euclidean)
    hc, dc = h - h.mean(axis=0), d - d.mean(axis=0)
    count = h.shape[0] - 1
    return ScalarGain.from_traces(float(np.sum(hc * dc)) / count,
                                  float(np.sum(dc * dc)) / count)


def operator_gain_from_pilot(hi: Sequence, lo: Sequence, lo_ref: Optional[Sequence] = None,
                             log_euclidean: bool = False) -> OperatorGain:
    """Операторный коэффициент по пилотам (матрицы ковариаций кодировок)."""
    h, d = _gain_moments(hi, lo, lo_ref, log_euclidean)
    hc, dc = h - h.mean(axis=0), d - d.mean(axis=0)
    count = h.shape[0] - 1
    dim = _array(hi[0]).shape[0]
    return OperatorGain(TangentOperator(dim, hc.T @ dc / count),
                        TangentOperator(dim, symmetrize(dc.T @ dc / count)))


# ----------------------------------------------------------------------
# MRMF: постановка задачи
# ----------------------------------------------------------------------

@dataclass
class MrmfSettings:
    """Параметры оптимизатора MRMF."""
    tol: float = 1e-8               # Порог ‖∇f‖ ≤ tol·(1 + |f|)
    max_iter: int = 2000
    armijo_c: float = 1e-4          # Константа достаточного убывания
    shrink: float = 0.5             # Коэффициент дробления шага
    initial_step: float = 1.0
    warm_start_step: bool = True    # Пробный шаг = 2 × последний принятый
    gradient: str = "finite_difference"
    fd_relative_step: float = 1e-6  # h = fd_relative_step·(1 + ‖B_ℓ‖_F)
    eig_floor: float = 1e-12        # Относительный пол спектра B²
    min_step: float = 1e-20

    def __post_init__(self):
        if self.gradient not in GRADIENT_MODES:
            raise ConfigError(f"Неизвестный режим градиента: {self.gradient}")
        if not 0.0 < self.shrink < 1.0 or not 0.0 < self.armijo_c < 1.0:
            raise ConfigError("armijo_c и shrink должны лежать в (0, 1)")
        if self.tol <= 0 or self.max_iter < 1 or self.initial_step <= 0:
            raise ConfigError("tol, max_iter и initial_step должны быть положительными")

    @classmethod
    def from_dict(cls, data: Mapping) -> "MrmfSettings":
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"Неизвестные параметры оптимизатора: {sorted(unknown)}")
        return cls(**dict(data))


@dataclass(frozen=True, eq=False)
class MrmfProblem:
    """
    Задача MRMF.

    data: реализация стека (N SPD-матриц в порядке слотов структуры)
    gamma_inv: Γ⁻¹ в кодировке слотов
    lambdas: веса штрафа λ_0, …, λ_L
    fixed: фиксированные средние по номеру точности
    slot_transforms: T_n, значение слота Σ_n = T_n Σ_f(n) T_nᵀ (None: I)
    penalty_frames: R_ℓ, штраф ‖log(R_ℓ Σ_ℓ R_ℓᵀ)‖² (None: I)
    initial: начальные значения Σ_ℓ для свободных точностей
    """
    structure: FidelityStructure
    data: Tuple[SpdMatrix, ...]
    gamma_inv: TangentOperator
    lambdas: Tuple[float, ...]
    fixed: Mapping[int, SpdMatrix] = field(default_factory=dict)
    settings: MrmfSettings = field(default_factory=MrmfSettings)
    slot_transforms: Optional[Tuple[Optional[np.ndarray], ...]] = None
    penalty_frames: Optional[Mapping[int, np.ndarray]] = None
    initial: Optional[Mapping[int, SpdMatrix]] = None

    def __post_init__(self):
        structure = self.structure
        data = tuple(as_spd(d) for d in self.data)
        if len(data) != structure.N:
            raise StructureError(f"{len(data)} слотов данных при N = {structure.N}")
        dims = {d.dim for d in data}
        if len(dims) != 1:
            raise DimensionMismatchError(f"Данные разной размерности: {sorted(dims)}")
        dim = dims.pop()
        n = structure.N * tangent_size(dim)
        if self.gamma_inv.dim != dim or self.gamma_inv.matrix.shape != (n, n):
            raise DimensionMismatchError(
                f"Γ⁻¹ формы {self.gamma_inv.matrix.shape} не согласован с N·q = {n}"
            )
        lambdas = tuple(float(x) for x in self.lambdas)
        if len(lambdas) != structure.L + 1 or any(x < 0 or not math.isfinite(x) for x in lambdas):
            raise StructureError(f"Нужно {structure.L + 1} неотрицательных λ, получено {lambdas}")
        fixed = {int(k): as_spd(v) for k, v in dict(self.fixed).items()}
        for k, v in fixed.items():
            if k not in structure.fidelities or v.dim != dim:
                raise StructureError(f"Некорректная фиксированная точность {k}")
        if len(fixed) == structure.L + 1:
            raise StructureError("Нет ни одной свободной точности")
        transforms = self.slot_transforms
        if transforms is not None:
            transforms = tuple(None if t is None else np.asarray(t, dtype=float) for t in transforms)
            if len(transforms) != structure.N or any(
                t is not None and t.shape != (dim, dim) for t in transforms
            ):
                raise DimensionMismatchError("Преобразования слотов не согласованы со структурой")
        frames = None
        if self.penalty_frames is not None:
            frames = {int(k): np.asarray(v, dtype=float) for k, v in self.penalty_frames.items()}
        initial = None
        if self.initial is not None:
            initial = {int(k): as_spd(v) for k, v in self.initial.items()}
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "lambdas", lambdas)
        object.__setattr__(self, "fixed", fixed)
        object.__setattr__(self, "slot_transforms", transforms)
        object.__setattr__(self, "penalty_frames", frames)
        object.__setattr__(self, "initial", initial)

    @property
    def dim(self) -> int:
        return self.data[0].dim

    @property
    def free_fidelities(self) -> List[int]:
        return [f for f in self.structure.fidelities if f not in self.fixed]

    @property
    def active_slots(self) -> List[int]:
        """Слоты групп, содержащих хотя бы одну свободную точность."""
        free = set(self.free_fidelities)
        active_groups = {k for k, g in enumerate(self.structure.groups) if free & set(g)}
        return [n for n, k in enumerate(self.structure.slot_group) if k in active_groups]

    def transform_of(self, slot: int) -> Optional[np.ndarray]:
        if self.slot_transforms is None:
            return None
        return self.slot_transforms[slot]

    def frame_of(self, fidelity: int) -> Optional[np.ndarray]:
        if self.penalty_frames is None:
            return None
        return self.penalty_frames.get(fidelity)

    def with_lambdas(self, lambdas: Sequence[float]) -> "MrmfProblem":
        return replace(self, lambdas=tuple(lambdas))


@dataclass(frozen=True, eq=False)
class EstimateReport:
    """Результат решения MRMF."""
    estimates: Tuple[SpdMatrix, ...]    # Σ̂_0, …, Σ̂_L
    objective_value: float
    mahalanobis_value: float
    penalty_value: float
    iterations: int
    converged: bool
    gradient_norm: float

    @property
    def sigma_hi(self) -> SpdMatrix:
        return self.estimates[0]


# ----------------------------------------------------------------------
# MRMF: целевая функция и градиент
# ----------------------------------------------------------------------

def _floored(eigenvalues: np.ndarray, floor: float) -> np.ndarray:
    return np.maximum(eigenvalues, floor * max(1.0, float(np.max(eigenvalues))))


def _recompose(eigenvalues: np.ndarray, eigenvectors: np.ndarray) -> np.ndarray:
    return symmetrize((eigenvectors * eigenvalues) @ eigenvectors.T)


def _log(x):
    return np.log(x)


def _dlog(x):
    return 1.0 / x


def _sqrt(x):
    return np.sqrt(x)


def _dsqrt(x):
    return 0.5 / np.sqrt(x)


class _Objective:
    """Скомпилированная целевая функция f(B) задачи MRMF."""

    def __init__(self, problem: MrmfProblem):
        self.problem = problem
        self.dim = problem.dim
        self.q = tangent_size(self.dim)
        self.free = problem.free_fidelities
        self.active = problem.active_slots
        self.M = extract_block(problem.gamma_inv, self.active, self.active).matrix
        self.floor = problem.settings.eig_floor
        self.slot_fidelity = problem.structure.slot_fidelity

    # Координаты: конкатенация flat(B_ℓ) по свободным точностям
    @property
    def size(self) -> int:
        return len(self.free) * self.q

    def pack(self, roots: Sequence[np.ndarray]) -> np.ndarray:
        return np.concatenate([flat_array(symmetrize(np.asarray(b, dtype=float))) for b in roots])

    def unpack(self, x: np.ndarray) -> Dict[int, np.ndarray]:
        blocks = unflat_array(x.reshape(len(self.free), self.q), self.dim)
        return dict(zip(self.free, blocks))

    def _means(self, x: np.ndarray):
        """Σ_ℓ и их спектры; для фиксированных — заданные значения."""
        spectra = {}
        roots = self.unpack(x)
        for ell, b in roots.items():
            beta, vecs = np.linalg.eigh(b)
            spectra[ell] = (_floored(beta ** 2, self.floor), vecs)
        for ell, value in self.problem.fixed.items():
            spectra[ell] = value.eig
        return roots, spectra

    def _slot(self, n: int, spectra):
        """Прямой проход для слота n: X_n = log_{Σ_n} S_n и промежуточные величины."""
        ell = self.slot_fidelity[n]
        transform = self.problem.transform_of(n)
        if transform is None:
            lam, vecs = spectra[ell]
        else:
            sigma_ell = _recompose(*spectra[ell])
            lam, vecs = np.linalg.eigh(symmetrize(transform @ sigma_ell @ transform.T))
            lam = _floored(lam, self.floor)
        root = np.sqrt(lam)
        P = _recompose(root, vecs)
        K = _recompose(1.0 / root, vecs)
        S = self.problem.data[n].entries
        W = symmetrize(K @ S @ K)
        lam_w, vecs_w = np.linalg.eigh(W)
        lam_w = _floored(lam_w, self.floor)
        L = _recompose(np.log(lam_w), vecs_w)
        X = symmetrize(P @ L @ P)
        return X, (ell, transform, lam, vecs, P, K, S, lam_w, vecs_w, L)

    def _penalty(self, ell: int, spectra):
        lam_ell = self.problem.lambdas[ell]
        if lam_ell == 0.0:
            return 0.0, None
        frame = self.problem.frame_of(ell)
        if frame is None:
            lam, vecs = spectra[ell]
        else:
            lam, vecs = np.linalg.eigh(symmetrize(frame @ _recompose(*spectra[ell]) @ frame.T))
            lam = _floored(lam, self.floor)
        logs = np.log(lam)
        return lam_ell * float(np.sum(logs ** 2)), (frame, lam, vecs, logs, lam_ell)

    def evaluate(self, x: np.ndarray, with_gradient: bool = False):
        roots, spectra = self._means(x)
        xs, caches = [], []
        for n in self.active:
            X, cache = self._slot(n, spectra)
            xs.append(flat_array(X))
            caches.append(cache)
        v = np.concatenate(xs)
        Mv = self.M @ v
        maha = float(v @ Mv)
        penalty = 0.0
        penalty_caches = {}
        for ell in self.free:
            value, cache = self._penalty(ell, spectra)
            penalty += value
            penalty_caches[ell] = cache
        total = maha + penalty
        if not with_gradient:
            return total, maha, penalty, None

        # Обратный проход
        grad_sigma = {ell: np.zeros((self.dim, self.dim)) for ell in self.free}
        g_v = (self.M + self.M.T) @ v
        for i, cache in enumerate(caches):
            ell, transform, lam, vecs, P, K, S, lam_w, vecs_w, L = cache
            if ell not in grad_sigma:
                continue
            G = unflat_array(g_v[i * self.q:(i + 1) * self.q], self.dim)
            g_P = G @ P @ L + L @ P @ G
            g_L = P @ G @ P
            g_W = frechet_derivative_from_spectrum(lam_w, vecs_w, _log, _dlog, g_L)
            g_K = g_W @ K @ S + S @ K @ g_W
            g_P = symmetrize(g_P - K @ g_K @ K)
            g_sigma_n = frechet_derivative_from_spectrum(lam, vecs, _sqrt, _dsqrt, g_P)
            if transform is not None:
                g_sigma_n = transform.T @ g_sigma_n @ transform
            grad_sigma[ell] += g_sigma_n
        for ell, cache in penalty_caches.items():
            if cache is None:
                continue
            frame, lam, vecs, logs, lam_ell = cache
            g_Z = _recompose(2.0 * lam_ell * logs / lam, vecs)
            if frame is not None:
                g_Z = frame.T @ g_Z @ frame
            grad_sigma[ell] += g_Z
        grads = []
        for ell in self.free:
            g = symmetrize(grad_sigma[ell])
            b = roots[ell]
            grads.append(flat_array(symmetrize(g @ b + b @ g)))
        return total, maha, penalty, np.concatenate(grads)

    def value(self, x: np.ndarray) -> float:
        return self.evaluate(x)[0]

    def finite_difference_gradient(self, x: np.ndarray) -> np.ndarray:
        rel = self.problem.settings.fd_relative_step
        grad = np.zeros_like(x)
        for j, ell in enumerate(self.free):
            block = slice(j * self.q, (j + 1) * self.q)
            h = rel * (1.0 + float(np.linalg.norm(x[block])))
            for k in range(block.start, block.stop):
                step = np.zeros_like(x)
                step[k] = h
                grad[k] = (self.value(x + step) - self.value(x - step)) / (2.0 * h)
        return grad

    def value_and_gradient(self, x: np.ndarray, mode: str):
        if mode == "analytic":
            total, maha, penalty, grad = self.evaluate(x, with_gradient=True)
        else:
            total, maha, penalty, _ = self.evaluate(x)
            grad = self.finite_difference_gradient(x)
        return total, maha, penalty, grad

    def initial_point(self) -> np.ndarray:
        """Корни из начальных значений: первый слот данных точности (или initial)."""
        roots = []
        for ell in self.free:
            if self.problem.initial and ell in self.problem.initial:
                start = self.problem.initial[ell]
            else:
                slot = self.problem.structure.reference_slot(ell)
                start = self.problem.data[slot]
                transform = self.problem.transform_of(slot)
                if transform is not None:
                    t_inv = np.linalg.inv(transform)
                    start = SpdMatrix(t_inv @ start.entries @ t_inv.T)
            roots.append(spd_sqrt(start).entries)
        return self.pack(roots)

    def estimates(self, x: np.ndarray) -> Tuple[SpdMatrix, ...]:
        _, spectra = self._means(x)
        out = []
        for ell in self.problem.structure.fidelities:
            if ell in self.problem.fixed:
                out.append(self.problem.fixed[ell])
            else:
                out.append(SpdMatrix.from_spectrum(*spectra[ell]))
        return tuple(out)


def mrmf_objective(problem: MrmfProblem, sigmas: Mapping[int, SpdMatrix]) -> float:
    """Значение штрафованной целевой функции в кандидатных средних свободных точностей."""
    objective = _Objective(problem)
    x = objective.pack([spd_sqrt(as_spd(sigmas[ell])).entries for ell in objective.free])
    return objective.value(x)


def mrmf_gradient(problem: MrmfProblem, roots: Sequence[MatrixLike],
                  mode: Optional[str] = None) -> TangentStack:
    """
    Градиент целевой функции по кодировкам квадратных корней B_ℓ.

    Args:
        problem: Задача MRMF
        roots: B_ℓ свободных точностей по возрастанию номера
        mode: "finite_difference" или "analytic" (по умолчанию из настроек)

    Returns:
        Стек симметричных матриц-градиентов, по одной на свободную точность
    """
    objective = _Objective(problem)
    if len(roots) != len(objective.free):
        raise DimensionMismatchError(
            f"Ожидалось {len(objective.free)} корней, получено {len(roots)}"
        )
    x = objective.pack([matrix_entries(b) for b in roots])
    mode = mode or problem.settings.gradient
    if mode not in GRADIENT_MODES:
        raise ConfigError(f"Неизвестный режим градиента: {mode}")
    grad = objective.value_and_gradient(x, mode)[3]
    blocks = unflat_array(grad.reshape(len(objective.free), objective.q), objective.dim)
    return TangentStack(tuple(SymMatrix(b) for b in blocks))


# ----------------------------------------------------------------------
# MRMF: оптимизатор
# ----------------------------------------------------------------------

def _descend(objective: _Objective, x: np.ndarray, settings: MrmfSettings):
    mode = settings.gradient
    total, maha, penalty, grad = objective.value_and_gradient(x, mode)
    trial_step = settings.initial_step
    max_step = settings.initial_step * 1e6
    iterations = 0
    converged = False

    while True:
        gnorm = float(np.linalg.norm(grad))
        if gnorm <= settings.tol * (1.0 + abs(total)):
            converged = True
            break
        if iterations >= settings.max_iter:
            break
        slope = gnorm ** 2
        step = trial_step
        accepted = False
        while step >= settings.min_step:
            candidate = x - step * grad
            value = objective.value(candidate)
            if math.isfinite(value) and value <= total - settings.armijo_c * step * slope:
                accepted = True
                break
            step *= settings.shrink
        if not accepted:
            logger.debug(f"Линейный поиск не нашёл шаг на итерации {iterations}, "
                         f"‖∇f‖ = {gnorm:.3e}")
            break
        x = candidate
        iterations += 1
        total, maha, penalty, grad = objective.value_and_gradient(x, mode)
        trial_step = min(2.0 * step, max_step) if settings.warm_start_step else settings.initial_step

    return x, total, maha, penalty, iterations, converged, float(np.linalg.norm(grad))


def mrmf_solve(problem: MrmfProblem) -> EstimateReport:
    """
    Решить задачу MRMF.

    Минимизирует f(B) = vᵀΓ⁻¹v + Σ_ℓ λ_ℓ‖log B_ℓ²‖²_F по свободным B_ℓ.
    Фиксированные точности подставляются, слоты групп только
    из фиксированных точностей исключаются.

    Args:
        problem: Постановка задачи

    Returns:
        EstimateReport; при отсутствии сходимости converged = False
    """
    objective = _Objective(problem)
    x0 = objective.initial_point()
    x, total, maha, penalty, iterations, converged, gnorm = _descend(
        objective, x0, problem.settings
    )
    if converged:
        logger.debug(f"MRMF сошёлся за {iterations} итераций: f = {total:.6g}")
    else:
        logger.warning(f"MRMF не сошёлся за {iterations} итераций: f = {total:.6g}, "
                       f"‖∇f‖ = {gnorm:.3e}")
    return EstimateReport(
        estimates=objective.estimates(x),
        objective_value=total,
        mahalanobis_value=maha,
        penalty_value=penalty,
        iterations=iterations,
        converged=converged,
        gradient_norm=gnorm,
    )


# ----------------------------------------------------------------------
# Предобусловливание
# ----------------------------------------------------------------------

class PreconditionTransform:
    """Обратное преобразование Σ_ℓ = Y_r Σ̃_ℓ Y_r, r — опорный слот точности ℓ."""

    def __init__(self, roots: Dict[int, SpdMatrix], fixed: Mapping[int, SpdMatrix]):
        self.roots = roots
        self.fixed = dict(fixed)

    def forward(self, sigmas: Mapping[int, SpdMatrix]) -> Dict[int, SpdMatrix]:
        return {ell: congruence(self.roots[ell], s) for ell, s in sigmas.items()}

    def backward(self, sigmas: Mapping[int, SpdMatrix]) -> Dict[int, SpdMatrix]:
        out = {}
        for ell, s in sigmas.items():
            y = self.roots[ell].entries
            out[ell] = SpdMatrix(y @ s.entries @ y)
        return out

    def __call__(self, report: EstimateReport) -> EstimateReport:
        restored = self.backward(dict(enumerate(report.estimates)))
        estimates = tuple(
            self.fixed.get(ell, restored[ell]) for ell in range(len(report.estimates))
        )
        return replace(report, estimates=estimates)


def precondition(problem: MrmfProblem) -> Tuple[MrmfProblem, PreconditionTransform]:
    """
    Перевести данные в единичные матрицы конгруэнцией Y_n = S_n^½.

    Γ⁻¹ заменяется на G_Y⁻¹ Γ⁻¹ G_Y⁻¹, слоты повторяющихся точностей
    связываются преобразованиями T̃_n = Y_n⁻¹ T_n Y_r, штраф сохраняется
    через R̃_ℓ = R_ℓ Y_r.

    Returns:
        (преобразованная задача, обратное преобразование результата)
    """
    structure = problem.structure
    dim = problem.dim
    roots = [spd_sqrt(s) for s in problem.data]
    ref_roots = {ell: roots[structure.reference_slot(ell)] for ell in structure.fidelities}
    back = PreconditionTransform(ref_roots, problem.fixed)

    eye = np.eye(dim)
    if all(np.array_equal(s.entries, eye) for s in problem.data):
        return problem, back

    lift = build_congruence_operator([spd_inverse(y) for y in roots]).matrix   # C ↦ Y C Y
    gamma_inv = symmetrize(lift @ problem.gamma_inv.matrix @ lift)
    transforms = []
    for n, ell in enumerate(structure.slot_fidelity):
        t = problem.transform_of(n)
        t = eye if t is None else t
        transforms.append(roots[n].inverse @ t @ ref_roots[ell].entries)
    frames = {}
    for ell in structure.fidelities:
        r = problem.frame_of(ell)
        r = eye if r is None else r
        frames[ell] = r @ ref_roots[ell].entries
    initial = back.forward(problem.initial) if problem.initial else None

    transformed = replace(
        problem,
        data=tuple(SpdMatrix.identity(dim) for _ in problem.data),
        gamma_inv=TangentOperator(dim, gamma_inv, problem.gamma_inv.structure),
        fixed=back.forward(problem.fixed),
        slot_transforms=tuple(transforms),
        penalty_frames=frames,
        initial=initial,
    )
    return transformed, back


# ----------------------------------------------------------------------
# Задача с фиксированной низкой точностью
# ----------------------------------------------------------------------

def mrmf_fixed_low(s_hi: SpdMatrix, s_lo: SpdMatrix, s_bar_lo: SpdMatrix,
                   gamma_inv: TangentOperator, lambda_hi: float = 0.0,
                   settings: Optional[MrmfSettings] = None) -> MrmfProblem:
    """
    Задача с Σ_lo = S̄_lo: остаётся пара (S_hi, S_lo) и одна свободная Σ_hi.

    Если gamma_inv задан для структуры с дополнительными слотами,
    берётся блок первых двух слотов.
    """
    if gamma_inv.count > 2:
        gamma_inv = extract_block(gamma_inv, [0, 1], [0, 1])
    return MrmfProblem(
        structure=FidelityStructure.coupled_pair(),
        data=(as_spd(s_hi), as_spd(s_lo)),
        gamma_inv=gamma_inv,
        lambdas=(lambda_hi, 0.0),
        fixed={1: as_spd(s_bar_lo)},
        settings=settings or MrmfSettings(),
    )


def control_variate_residual(sigma_hi: SpdMatrix, s_hi: SpdMatrix, s_lo: SpdMatrix,
                             s_bar_lo: SpdMatrix, gamma: TangentOperator) -> Tuple[float, float]:
    """
    Невязка нелинейного уравнения управляющей переменной
    flat(log_{Σ̂_hi} S_hi) = Γ_lo,hi Γ_lo⁻¹ flat(log_{S̄_lo} S_lo).

    Returns:
        (норма невязки, масштаб max(1, ‖правая часть‖))
    """
    lhs = tangent_residual([s_hi], [sigma_hi])
    v_lo = tangent_residual([s_lo], [s_bar_lo])
    cross = extract_block(gamma, [0], [1]).matrix
    auto = extract_block(gamma, [1], [1]).matrix
    rhs = cross @ solve(auto, v_lo, assume_a="sym")
    return float(np.linalg.norm(lhs - rhs)), max(1.0, float(np.linalg.norm(rhs)))


# ----------------------------------------------------------------------
# Подбор λ
# ----------------------------------------------------------------------

ProblemFactory = Callable[[float, np.random.Generator], MrmfProblem]


def lambda_sweep(make_problem: ProblemFactory, lambda_grid: Sequence[float], trials: int,
                 seed: int, executor: Optional[Executor] = None,
                 stream_key: Tuple[int, ...] = ()) -> Dict[float, float]:
    """
    Среднее минимального расстояния Махаланобиса для каждого λ сетки.

    Испытание t использует один и тот же поток при всех λ.
    λ, при которых все решения разошлись, получают значение nan.
    """
    if trials < 1:
        raise ConfigError(f"Число испытаний должно быть положительным: {trials}")

    def run(args):
        lam, trial = args
        rng = substream(seed, Purpose.TUNE, *stream_key, trial)
        try:
            report = mrmf_solve(make_problem(lam, rng))
        except MrmfError as e:
            logger.warning(f"λ = {lam:.3g}, испытание {trial}: {e}")
            return None
        if not report.converged or not math.isfinite(report.mahalanobis_value):
            return None
        return report.mahalanobis_value

    jobs = [(float(lam), t) for lam in lambda_grid for t in range(trials)]
    results = list(executor.map(run, jobs) if executor else map(run, jobs))
    table = {}
    for i, lam in enumerate(float(x) for x in lambda_grid):
        values = [r for r in results[i * trials:(i + 1) * trials] if r is not None]
        table[lam] = float(np.mean(values)) if values else float("nan")
        if not values:
            logger.warning(f"λ = {lam:.3g} исключено: все решения разошлись")
    return table


def select_lambda(table: Mapping[float, float], target: float) -> float:
    """λ со средним, ближайшим к цели; при равенстве — меньшее λ."""
    best, best_gap = None, math.inf
    for lam in sorted(table):
        mean = table[lam]
        if not math.isfinite(mean):
            continue
        gap = abs(mean - target)
        if gap < best_gap:
            best, best_gap = lam, gap
    if best is None:
        raise MrmfError("Все значения λ исключены: ни одно решение не сошлось")
    return best


def tune_lambda(make_problem: ProblemFactory, lambda_grid: Sequence[float], trials: int,
                seed: int, target: Optional[float] = None,
                executor: Optional[Executor] = None,
                stream_key: Tuple[int, ...] = ()) -> float:
    """
    Подобрать λ по правилу: среднее расстояние Махаланобиса ≈ d(d+1)/2.

    Args:
        make_problem: Фабрика задачи (λ, генератор) -> MrmfProblem
        lambda_grid: Непустая сетка λ
        trials: Число испытаний на каждое λ
        seed: Корневое зерно
        target: Цель (по умолчанию d(d+1)/2 размерности задачи)
        executor: Пул для параллельных решений
        stream_key: Дополнительные индексы потока (например, номер бюджета)

    Returns:
        Выбранное λ
    """
    grid = [float(x) for x in lambda_grid]
    if not grid:
        raise ConfigError("Пустая сетка λ")
    if len(grid) == 1:
        return grid[0]
    table = lambda_sweep(make_problem, grid, trials, seed, executor, stream_key)
    if target is None:
        first = make_problem(grid[0], substream(seed, Purpose.TUNE, *stream_key, 0))
        target = float(tangent_size(first.dim))
    selected = select_lambda(table, target)
    logger.info(f"Выбрано λ = {selected:.4g} (цель {target:g}, среднее {table[selected]:.4g})")
    return selected
