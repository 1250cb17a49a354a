import numpy as np
import pytest

from diffin.dataset import LabeledDataset, make_synthetic
from diffin.model import ModelSpec
from diffin.optimizer import OptimizerConfig
from diffin.trainer import TrainConfig


def quad_ds(values, name="quad"):
    """Scalar quadratic stub data: each sample is a point ``x``; loss ``0.5 (theta - x)^2``."""
    x = np.asarray(values, dtype=np.float64).reshape(-1, 1)
    return LabeledDataset(x, np.zeros(len(x), dtype=np.int64), 2, name)


QUAD = ModelSpec("quadratic", 1)


def quad_cfg(T, lr=0.1, batch_size=2, kind="sgd", plan="all", m=1, seed=0, init=(1.0,), **opt):
    return TrainConfig(QUAD, OptimizerConfig(kind, lr=lr, **opt), batch_size, T, seed, plan, m, init_params=init)


@pytest.fixture(scope="session")
def moons():
    return make_synthetic("two_moons", 200, 0.1, 0), make_synthetic("two_moons", 400, 0.1, 1)


@pytest.fixture(scope="session")
def gaussians():
    return make_synthetic("two_gaussians", 100, 0.8, 3), make_synthetic("two_gaussians", 400, 0.8, 4)
