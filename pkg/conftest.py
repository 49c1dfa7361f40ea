"""
Shared pytest fixtures: small network specs, tiny synthetic datasets and the --runslow switch
"""

import numpy as np
import pytest

from data_loader import synth_dices
from models import NetSpec


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run desk-scale reproduction tests")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_spec():
    """16x16 two-view input, two conv layers: 16 -> 8 -> 4"""
    return NetSpec(input_shape=(2, 16, 16), conv_channels=[2, 4], kernel=3, stride=2, padding=1, latent_dim=4)


@pytest.fixture
def tiny_dices():
    return synth_dices(16, 12, np.random.default_rng(7), image_size=16)


@pytest.fixture
def tiny_config_dict(tmp_path):
    """Experiment config small enough for a full command round trip in seconds"""
    return {
        "name": "tiny",
        "dataset": {"source": "synth_dices", "n_train": 16, "n_test": 12, "image_size": 16},
        "net": {"input_shape": [2, 16, 16], "conv_channels": [2, 4], "kernel": 3, "stride": 2, "padding": 1, "latent_dim": 4},
        "autoencoder": {"lr": 0.001, "batch_size": 8, "weight_decay": 1e-6, "epochs": 1},
        "svdd": {"nu": 0.4, "lr": 0.0001, "batch_size": 8, "epochs": 2, "warmup_epochs": 1},
        "search": {"min_budget": 1, "max_budget": 3, "eta": 3},
        "n_seeds": 1,
        "output_dir": str(tmp_path / "out"),
    }
