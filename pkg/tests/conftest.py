"""Shared fixtures: a small, fast experiment and a matching model"""
import numpy as np
import pytest

from blade_sim.blade_config import build_sim_config
from blade_sim.blade_schemas import ModelKind, ModelSpec
from blade_sim.mlcore import make_partitioned_data

SMALL_DOC = {
    "seed": 7,
    "n_clients": 4,
    "data": {"samples_per_client": 40, "dims": 8, "num_classes": 4, "skew": 0.5,
             "test_samples": 200, "class_sep": 1.0},
    "train": {"lr": 0.2, "batch_size": 10},
    # t_B = 40 / 4 = 10, t_T = 2 * t_B = 20 -> K = 120 // 30 = 4
    "budget": {"T_Sum": 120.0, "tau": 1, "theta": 2.0, "f": 1.0},
    "output": {"write": False},
}


@pytest.fixture
def small_doc():
    import copy
    return copy.deepcopy(SMALL_DOC)


@pytest.fixture
def small_config(small_doc):
    return build_sim_config(small_doc)


@pytest.fixture
def linear_spec():
    return ModelSpec(kind=ModelKind.LINEAR, input_dim=8, num_classes=4)


@pytest.fixture
def mlp_spec():
    return ModelSpec(kind=ModelKind.MLP, input_dim=8, num_classes=4, hidden_dim=5)


@pytest.fixture
def small_data():
    return make_partitioned_data(seed=3, n_clients=4, samples_per_client=40, dims=8,
                                 num_classes=4, skew=0.5, test_samples=200, class_sep=1.0)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
