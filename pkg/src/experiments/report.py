"""
Отчёты экспериментов: CSV по испытаниям, сводка по бюджетам,
манифест запуска и гистограммы для внешних графиков.
"""

import csv
import json
import logging
import math
import platform
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence

import numpy as np
import scipy

from errors import ReportError

logger = logging.getLogger(__name__)

CSV_COLUMNS = ("trial", "budget", "estimator", "se_frobenius", "se_intrinsic",
               "min_eig", "mahalanobis", "wall_ms")
MRE_COLUMNS = ("trial", "budget", "estimator", "mre")
METRICS = ("se_frobenius", "se_intrinsic")


@dataclass(frozen=True)
class TrialRecord:
    """Результат одного оценщика в одном испытании."""
    trial: int
    budget: float
    estimator: str
    se_frobenius: float
    se_intrinsic: float         # +∞ для знаконеопределённой оценки
    min_eig: float
    mahalanobis: Optional[float] = None     # Только для MRMF
    wall_ms: float = 0.0

    @property
    def is_indefinite(self) -> bool:
        """Оценка не SPD по порогу definiteness(); тогда и только тогда se_intrinsic = +∞."""
        return math.isinf(self.se_intrinsic)


@dataclass(frozen=True)
class MreRecord:
    trial: int
    budget: float
    estimator: str
    mre: float


def format_float(value: Optional[float]) -> str:
    """Точное десятичное представление; +∞ записывается как inf."""
    if value is None:
        return ""
    if math.isinf(value):
        return "inf" if value > 0 else "-inf"
    if math.isnan(value):
        return "nan"
    return repr(float(value))


def _parse_float(text: str, column: str, line: int) -> float:
    try:
        return float(text)
    except ValueError:
        raise ReportError(f"Строка {line}: некорректное значение {column} = {text!r}")


def write_trials_csv(path: Path, records: Sequence[TrialRecord]):
    """Записать испытания в порядке (бюджет, испытание, порядок оценщиков)."""
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for r in records:
            writer.writerow([
                r.trial, format_float(r.budget), r.estimator,
                format_float(r.se_frobenius), format_float(r.se_intrinsic),
                format_float(r.min_eig), format_float(r.mahalanobis),
                format_float(r.wall_ms) if r.wall_ms else "0",
            ])
    logger.info(f"Записано {len(records)} строк в {path}")


def read_trials_csv(path: Path) -> List[TrialRecord]:
    """
    Прочитать CSV испытаний.

    Raises:
        ReportError: файл повреждён или не содержит испытаний
    """
    try:
        with open(path, "r", encoding="utf-8", newline="") as f:
            rows = list(csv.reader(f))
    except OSError as e:
        raise ReportError(f"Не удалось прочитать {path}: {e}") from e
    if not rows or tuple(rows[0]) != CSV_COLUMNS:
        raise ReportError(f"{path}: неверный заголовок, ожидалось {','.join(CSV_COLUMNS)}")
    records = []
    for line, row in enumerate(rows[1:], start=2):
        if len(row) != len(CSV_COLUMNS):
            raise ReportError(f"Строка {line}: {len(row)} полей вместо {len(CSV_COLUMNS)}")
        values = dict(zip(CSV_COLUMNS, row))
        try:
            trial = int(values["trial"])
        except ValueError:
            raise ReportError(f"Строка {line}: некорректный номер испытания {values['trial']!r}")
        records.append(TrialRecord(
            trial=trial,
            budget=_parse_float(values["budget"], "budget", line),
            estimator=values["estimator"],
            se_frobenius=_parse_float(values["se_frobenius"], "se_frobenius", line),
            se_intrinsic=_parse_float(values["se_intrinsic"], "se_intrinsic", line),
            min_eig=_parse_float(values["min_eig"], "min_eig", line),
            mahalanobis=(_parse_float(values["mahalanobis"], "mahalanobis", line)
                         if values["mahalanobis"] else None),
            wall_ms=_parse_float(values["wall_ms"], "wall_ms", line),
        ))
    if not records:
        raise ReportError(f"{path}: нет ни одного испытания")
    return records


def write_mre_csv(path: Path, records: Sequence[MreRecord]):
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(MRE_COLUMNS)
        for r in records:
            writer.writerow([r.trial, format_float(r.budget), r.estimator, format_float(r.mre)])


# ----------------------------------------------------------------------
# Сводки
# ----------------------------------------------------------------------

def _json_number(value: float) -> Any:
    if value is None:
        return None
    if math.isfinite(value):
        return float(value)
    return format_float(value)


def _statistics(values: List[float]) -> Dict[str, Any]:
    arr = np.array(values, dtype=float)
    finite = arr[~np.isnan(arr)]
    if finite.size == 0:
        return {"median": None, "mean": None}
    return {"median": _json_number(float(np.median(finite))),
            "mean": _json_number(float(np.mean(finite)))}


def summarize(records: Iterable[TrialRecord],
              mre: Iterable[MreRecord] = ()) -> Dict[str, Any]:
    """
    Сводка по (бюджет, оценщик).

    Медиана и среднее обеих ошибок, доля знаконеопределённых оценок,
    среднее расстояние Махаланобиса и медиана MRE.
    """
    records = list(records)
    if not records:
        raise ReportError("Нет испытаний для сводки")
    groups: Dict[str, Dict[str, List[TrialRecord]]] = {}
    for r in records:
        groups.setdefault(format_float(r.budget), {}).setdefault(r.estimator, []).append(r)
    mre_groups: Dict[str, Dict[str, List[float]]] = {}
    for m in mre:
        mre_groups.setdefault(format_float(m.budget), {}).setdefault(m.estimator, []).append(m.mre)

    summary: Dict[str, Any] = {}
    for budget, by_estimator in groups.items():
        summary[budget] = {}
        for name, rows in by_estimator.items():
            entry = {"trials": len(rows)}
            for metric in METRICS:
                entry[metric] = _statistics([getattr(r, metric) for r in rows])
            valid = [r for r in rows if not math.isnan(r.se_intrinsic)]
            entry["indefinite_fraction"] = (
                sum(r.is_indefinite for r in valid) / len(valid) if valid else None
            )
            maha = [r.mahalanobis for r in rows if r.mahalanobis is not None
                    and math.isfinite(r.mahalanobis)]
            entry["mean_mahalanobis"] = float(np.mean(maha)) if maha else None
            mre_values = mre_groups.get(budget, {}).get(name)
            if mre_values:
                entry["median_mre"] = _json_number(float(np.median(mre_values)))
            summary[budget][name] = entry
    return summary


def write_json(path: Path, data: Mapping[str, Any]):
    with open(path, "w", encoding="utf-8") as f:
        json.dump(data, f, ensure_ascii=False, indent=2, sort_keys=True)
        f.write("\n")


def build_manifest(config, selected_lambdas: Mapping[str, float],
                   package_version: str) -> Dict[str, Any]:
    """Манифест запуска: зерно, хэш конфигурации, версии, выбранные λ."""
    return {
        "name": config.name,
        "kind": config.kind.value,
        "seed": config.seed,
        "config_sha256": config.config_hash(),
        "versions": {
            "python": platform.python_version(),
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "package": package_version,
        },
        "selected_lambda": dict(selected_lambdas),
    }


def histogram(records: Sequence[TrialRecord], bins: int) -> List[Dict[str, Any]]:
    """
    Гистограммы log10 ошибок по (бюджет, оценщик, метрика).

    Бесконечные и нечисловые значения считаются отдельно.
    """
    rows = []
    keys = sorted({(r.budget, r.estimator) for r in records})
    for budget, name in keys:
        subset = [r for r in records if r.budget == budget and r.estimator == name]
        for metric in METRICS:
            values = np.array([getattr(r, metric) for r in subset], dtype=float)
            ok = np.isfinite(values) & (values > 0)
            if np.any(ok):
                counts, edges = np.histogram(np.log10(values[ok]), bins=bins)
                for k, count in enumerate(counts):
                    rows.append({"budget": budget, "estimator": name, "metric": metric,
                                 "log10_low": float(edges[k]), "log10_high": float(edges[k + 1]),
                                 "count": int(count)})
            nonfinite = int(np.sum(~ok))
            if nonfinite:
                rows.append({"budget": budget, "estimator": name, "metric": metric,
                             "log10_low": "inf", "log10_high": "inf", "count": nonfinite})
    return rows


def write_histogram_csv(path: Path, rows: Sequence[Mapping[str, Any]]):
    columns = ("budget", "estimator", "metric", "log10_low", "log10_high", "count")
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([
                format_float(row[c]) if isinstance(row[c], float) else row[c] for c in columns
            ])
