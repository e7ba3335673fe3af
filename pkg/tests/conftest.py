import numpy as np
import pytest

from bilevel.core import Dataset


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def regression_data(rng, n, d, name=""):
    return Dataset(rng.standard_normal((n, d)), rng.standard_normal(n), name)


def classification_data(rng, n, d, C, name=""):
    return Dataset(rng.standard_normal((n, d)), rng.integers(0, C, n), name, n_classes=C)
