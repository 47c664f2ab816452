import numpy as np
import pytest

from copycat_lab.demos import DemoDataset, collect
from copycat_lab.envs import make_env


@pytest.fixture(scope="session")
def dense_env():
    return make_env("braketown", {"traffic_level": "dense"})


@pytest.fixture(scope="session")
def small_trajs(dense_env):
    return collect(dense_env, 12, noise_prob=0.2, seed=3)


@pytest.fixture(scope="session")
def small_ds(small_trajs):
    return DemoDataset(small_trajs, 6)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# -- acceptance summary -------------------------------------------------------

ACCEPTANCE_KEY = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[ACCEPTANCE_KEY] = {}


@pytest.fixture
def record_criterion(request):
    """record_criterion(number, passed, detail) stores one acceptance line."""
    store = request.config.stash[ACCEPTANCE_KEY]

    def _record(number, passed, detail):
        store[number] = (bool(passed), detail)
        return passed

    return _record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    store = config.stash.get(ACCEPTANCE_KEY, {})
    if not store:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(store):
        passed, detail = store[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}")
