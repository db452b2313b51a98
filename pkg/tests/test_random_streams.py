import numpy as np
import pytest

from random_streams import Purpose, substream


def test_same_key_same_stream():
    a = substream(42, Purpose.EVALUATE, 1, 7).standard_normal(5)
    b = substream(42, Purpose.EVALUATE, 1, 7).standard_normal(5)
    assert np.array_equal(a, b)


@pytest.mark.parametrize("other", [
    (43, Purpose.EVALUATE, 1, 7),
    (42, Purpose.PILOT, 1, 7),
    (42, Purpose.EVALUATE, 7, 1),
    (42, Purpose.EVALUATE, 1),
])
def test_different_keys_differ(other):
    base = substream(42, Purpose.EVALUATE, 1, 7).standard_normal(5)
    assert not np.array_equal(base, substream(*other).standard_normal(5))


def test_negative_key_rejected():
    with pytest.raises(ValueError):
        substream(-1, Purpose.TUNE)
    with pytest.raises(ValueError):
        substream(1, Purpose.TUNE, -2)
