import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from flexmerge.datagen import ScenarioConfig, generate
from flexmerge.market_model import ConductSpec

settings.register_profile("default", deadline=None, max_examples=60, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def bertrand_small():
    return generate(ScenarioConfig(T=40, conduct=ConductSpec.bertrand(), seed=3))


@pytest.fixture(scope="session")
def profit_weight_small():
    return generate(ScenarioConfig(T=40, conduct=ConductSpec.profit_weight(0.75), seed=4))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_ACCEPTANCE = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_ACCEPTANCE] = []


@pytest.fixture(scope="session")
def acceptance_log(request):
    """Collects one pass/fail line per acceptance criterion."""
    return request.config.stash[_ACCEPTANCE]


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
