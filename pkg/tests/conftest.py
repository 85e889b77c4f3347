from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from group_influence import Dataset, LossModel, train
from group_influence.solver import ORACLE_CONFIG

settings.register_profile("repo", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("repo")

DATA_DIR = Path(__file__).parent / "data"
MNIST_IMAGES = DATA_DIR / "mnist17-images-idx3-ubyte.gz"
MNIST_LABELS = DATA_DIR / "mnist17-labels-idx1-ubyte.gz"
IRIS = DATA_DIR / "iris.csv"


def two_point_data():
    """l1 = theta^2 (x = sqrt 2, y = 0) and l2 = (theta - 2)^2 / 2 (x = 1, y = 2)."""
    return Dataset(np.array([[np.sqrt(2.0)], [1.0]]), np.array([0.0, 2.0]), id="two-point")


def equal_curvature_data():
    return Dataset(np.array([[1.0], [1.0]]), np.array([0.0, 2.0]), id="equal-curvature")


@pytest.fixture
def two_point():
    data = two_point_data()
    tm = train(LossModel("quadratic", 0.0), data, config=ORACLE_CONFIG)
    return tm, data


@pytest.fixture
def equal_curvature():
    data = equal_curvature_data()
    tm = train(LossModel("quadratic", 0.0), data, config=ORACLE_CONFIG)
    return tm, data


def random_problem(rng, family="binary_logistic", m=None, d=None, l2=0.05, classes=3):
    m = int(m if m is not None else rng.integers(20, 80))
    d = int(d if d is not None else rng.integers(1, 6))
    X = rng.standard_normal((m, d))
    if family == "binary_logistic":
        y = (X @ rng.standard_normal(d) + 0.5 * rng.standard_normal(m) > 0).astype(float)
        data = Dataset(X, y, class_count=2)
    elif family == "softmax":
        data = Dataset(X, rng.integers(0, classes, m), class_count=classes)
    else:
        data = Dataset(X, X @ rng.standard_normal(d) + 0.3 * rng.standard_normal(m))
    return LossModel(family, l2), data
