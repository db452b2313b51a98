"""
Хранилище пилотных результатов.
Сохраняет операторы ковариации в двоичном формате и средние точностей в JSON,
чтобы пилотную фазу можно было не повторять.
"""

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from manifold_stats import FidelityStructure
from spd_core import SpdMatrix
from tangent_algebra import TangentOperator, tangent_size

logger = logging.getLogger(__name__)

# Формат файла оператора:
#   b"TOPR", uint32 d, uint32 N, uint32 число меток, int32 метки слотов,
#   затем (Nq)² значений float64, little-endian, построчно
OPERATOR_MAGIC = b"TOPR"
_HEADER = np.dtype([("d", "<u4"), ("n", "<u4"), ("labels", "<u4")])


def encode_operator(operator: TangentOperator, slot_labels: Sequence[int] = ()) -> bytes:
    """Двоичное представление квадратного оператора."""
    if not operator.is_square:
        raise ValueError("Сохраняются только квадратные операторы")
    header = np.array([(operator.dim, operator.count, len(slot_labels))], dtype=_HEADER)
    return b"".join([
        OPERATOR_MAGIC,
        header.tobytes(),
        np.asarray(slot_labels, dtype="<i4").tobytes(),
        np.ascontiguousarray(operator.matrix, dtype="<f8").tobytes(),
    ])


def decode_operator(payload: bytes) -> Tuple[TangentOperator, List[int]]:
    """
    Разобрать двоичное представление оператора.

    Returns:
        (оператор, метки слотов)

    Raises:
        ValueError: неверная сигнатура или длина данных
    """
    if payload[:4] != OPERATOR_MAGIC:
        raise ValueError("Неверная сигнатура файла оператора")
    offset = 4
    header = np.frombuffer(payload, dtype=_HEADER, count=1, offset=offset)[0]
    offset += _HEADER.itemsize
    dim, count, label_count = int(header["d"]), int(header["n"]), int(header["labels"])
    labels = np.frombuffer(payload, dtype="<i4", count=label_count, offset=offset)
    offset += 4 * label_count
    size = count * tangent_size(dim)
    expected = offset + 8 * size * size
    if len(payload) != expected:
        raise ValueError(f"Длина данных {len(payload)} байт, ожидалось {expected}")
    matrix = np.frombuffer(payload, dtype="<f8", count=size * size, offset=offset)
    return TangentOperator(dim, matrix.reshape(size, size)), [int(x) for x in labels]


@dataclass
class StoreConfig:
    """Расположение хранилища."""
    directory: Path
    operator_name: str = "gamma.topr"
    pilot_name: str = "pilot.json"
    index_name: str = "index.json"


class OperatorStore:
    """
    Чтение и запись пилотных результатов.
    Методы записи возвращают False, методы чтения None при ошибке.
    """

    def __init__(self, config: StoreConfig):
        self.config = config

    @property
    def operator_path(self) -> Path:
        return Path(self.config.directory) / self.config.operator_name

    @property
    def pilot_path(self) -> Path:
        return Path(self.config.directory) / self.config.pilot_name

    @property
    def index_path(self) -> Path:
        return Path(self.config.directory) / self.config.index_name

    def write_operator(self, operator: TangentOperator,
                       slot_labels: Sequence[int] = ()) -> bool:
        """
        Записать оператор.

        Args:
            operator: Квадратный оператор
            slot_labels: Метки слотов (точности)

        Returns:
            True если запись успешна
        """
        try:
            self.operator_path.parent.mkdir(parents=True, exist_ok=True)
            self.operator_path.write_bytes(encode_operator(operator, slot_labels))
            logger.debug(f"Оператор {operator.matrix.shape} записан в {self.operator_path}")
            return True
        except (OSError, ValueError) as e:
            logger.error(f"Ошибка записи оператора в {self.operator_path}: {e}")
            return False

    def read_operator(self) -> Optional[Tuple[TangentOperator, List[int]]]:
        """Прочитать оператор и метки слотов."""
        try:
            return decode_operator(self.operator_path.read_bytes())
        except FileNotFoundError:
            logger.debug(f"Файл оператора {self.operator_path} отсутствует")
            return None
        except (OSError, ValueError) as e:
            logger.error(f"Ошибка чтения оператора из {self.operator_path}: {e}")
            return None

    def write_pilot(self, structure: FidelityStructure, means: Sequence[SpdMatrix],
                    gamma: TangentOperator) -> bool:
        """Записать структуру, средние точностей и оператор ковариации."""
        data = {
            "structure": structure.to_dict(),
            "means": [m.entries.tolist() for m in means],
        }
        try:
            self.pilot_path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.pilot_path, "w", encoding="utf-8") as f:
                json.dump(data, f, ensure_ascii=False, indent=2)
        except OSError as e:
            logger.error(f"Ошибка записи пилотных средних в {self.pilot_path}: {e}")
            return False
        return self.write_operator(gamma, structure.slot_fidelity)

    def read_pilot(self) -> Optional[Tuple[FidelityStructure, List[SpdMatrix], TangentOperator]]:
        """Прочитать сохранённые пилотные результаты."""
        try:
            with open(self.pilot_path, "r", encoding="utf-8") as f:
                data = json.load(f)
            structure = FidelityStructure.from_dict(data["structure"])
            means = [SpdMatrix(np.array(m)) for m in data["means"]]
        except FileNotFoundError:
            return None
        except (OSError, KeyError, ValueError) as e:
            logger.error(f"Ошибка чтения пилотных средних из {self.pilot_path}: {e}")
            return None
        stored = self.read_operator()
        if stored is None:
            return None
        gamma, labels = stored
        if tuple(labels) != structure.slot_fidelity:
            logger.error(f"Метки слотов {labels} не совпадают со структурой {structure.slot_fidelity}")
            return None
        return structure, means, gamma

    def write_index(self, pilot_hash: str, artifacts: Sequence[str],
                    gains: Mapping[str, float]) -> bool:
        """
        Записать индекс полного пилота.

        Args:
            pilot_hash: Хэш конфигурации пилота
            artifacts: Имена сохранённых подкаталогов со структурами
            gains: Скалярные коэффициенты EMF/LEMF по именам
        """
        data = {
            "pilot_sha256": pilot_hash,
            "artifacts": list(artifacts),
            "gains": {key: float(value) for key, value in gains.items()},
        }
        try:
            self.index_path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.index_path, "w", encoding="utf-8") as f:
                json.dump(data, f, ensure_ascii=False, indent=2, sort_keys=True)
            logger.debug(f"Индекс пилота записан в {self.index_path}")
            return True
        except OSError as e:
            logger.error(f"Ошибка записи индекса пилота в {self.index_path}: {e}")
            return False

    def read_index(self, pilot_hash: str) -> Optional[Tuple[List[str], Dict[str, float]]]:
        """
        Прочитать индекс пилота.

        Returns:
            (имена структур, коэффициенты) или None, если индекса нет,
            он повреждён или записан для другой конфигурации
        """
        try:
            with open(self.index_path, "r", encoding="utf-8") as f:
                data = json.load(f)
            stored_hash = data["pilot_sha256"]
            artifacts = [str(key) for key in data["artifacts"]]
            gains = {str(key): float(value) for key, value in data["gains"].items()}
        except FileNotFoundError:
            return None
        except (OSError, KeyError, TypeError, ValueError, AttributeError) as e:
            logger.error(f"Ошибка чтения индекса пилота из {self.index_path}: {e}")
            return None
        if stored_hash != pilot_hash:
            logger.info(f"Индекс {self.index_path} записан для другой конфигурации пилота")
            return None
        return artifacts, gains
