import numpy as np
import pytest

from fedface.config import ExperimentConfig


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_cfg():
    """A fast 3-party configuration used by simulator and CLI tests."""
    return ExperimentConfig().replace(hyper__R=6, hyper__K=3, fv__pairs_per_fold=100,
                                      data__val_samples_per_class=20)
