import os
import tempfile

# Keep test logs out of the working tree; must run before goalmask_nav.logger is imported.
os.environ.setdefault("LOG_PATH", tempfile.NamedTemporaryFile(suffix=".log", delete=False).name)

import numpy as np
import pytest
import torch

from goalmask_nav import numcore
from goalmask_nav.config import Config, TestConfig
from goalmask_nav.policy import PolicyConfig, build_policy
from goalmask_nav.world import generate_map, open_map, t_junction_map


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run slow tests")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture(autouse=True)
def process_config(monkeypatch):
    torch.set_num_threads(TestConfig.NUM_THREADS)
    monkeypatch.setattr(Config, "WORKERS", TestConfig.WORKERS)
    monkeypatch.setattr(Config, "DEFAULT_SEED", None)
    yield


@pytest.fixture(scope="session")
def small_map():
    return generate_map(11)


@pytest.fixture
def empty_map():
    return open_map()


@pytest.fixture
def junction_map():
    return t_junction_map()


@pytest.fixture
def mini_config():
    return PolicyConfig.miniature()


@pytest.fixture
def mini_model(mini_config):
    return build_policy(mini_config, seed=0, mask_prob=0.5)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def float64():
    with numcore.precision("float64"):
        yield
