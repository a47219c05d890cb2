import numpy as np
import pytest

from ogfr import tensor as T
from ogfr.config import Config
from ogfr.synth import build_splits


@pytest.fixture
def f64():
    with T.precision(np.float64):
        yield


@pytest.fixture(scope="session")
def small_cfg():
    return Config(seed=0).replace(data={"n_ids": 4, "imgs_per_id": 4}, optim={"max_steps": 6})


@pytest.fixture(scope="session")
def small_splits(small_cfg):
    return build_splits(small_cfg.data.n_ids, small_cfg.data.imgs_per_id, small_cfg)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def pytest_configure(config):
    config.acceptance_lines = {}


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.acceptance_lines
    if lines:
        terminalreporter.section("acceptance criteria")
        for key in sorted(lines):
            terminalreporter.write_line(lines[key])
