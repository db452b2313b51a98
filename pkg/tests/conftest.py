"""Общие фикстуры тестов."""

import sys
from pathlib import Path

import numpy as np
import pytest

# Добавляем путь src в sys.path, как это делает main.py
SRC_DIR = Path(__file__).resolve().parent.parent / "src"
if str(SRC_DIR) not in sys.path:
    sys.path.insert(0, str(SRC_DIR))

from spd_core import SpdMatrix, random_spd  # noqa: E402


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(12345)


@pytest.fixture
def spd_pair(rng):
    """Пара SPD-матриц 3×3, вторая с обусловленностью до 50."""
    return random_spd(3, rng), random_spd(3, rng, condition=50.0)


@pytest.fixture
def diagonal_spd():
    return SpdMatrix(np.diag([1.0, 2.0, 4.0]))
