import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from depthgraph.forward import DEFAULT_NOISE, DEFAULT_QUANTIZER
from depthgraph.scenes import two_plane_scene

settings.register_profile(
    "default", max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


@pytest.fixture
def q():
    return DEFAULT_QUANTIZER


@pytest.fixture
def m():
    return DEFAULT_NOISE


@pytest.fixture(scope="session")
def scene():
    return two_plane_scene()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(RESULTS):
            terminalreporter.write_line(line)
