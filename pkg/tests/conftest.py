from __future__ import annotations

import numpy as np
import pytest

from stmt.volcore import LabelMap, Volume


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_volume(rng, shape=(5, 6, 7), spacing=(1.0, 1.0, 1.0)) -> Volume:
    return Volume(rng.normal(size=shape).astype(np.float32), spacing)


def random_label(rng, shape=(5, 6, 7), num_classes=4, spacing=(1.0, 1.0, 1.0)) -> LabelMap:
    return LabelMap(rng.integers(0, num_classes, size=shape), spacing, num_classes)
