"""Shared fixtures and hypothesis profile for the vpflow test suite."""

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from vpflow.targets import make_builtin_target
from vpflow.vp import VpScoreModel

settings.register_profile(
    "vpflow",
    deadline=None,
    max_examples=25,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("vpflow")


@pytest.fixture(scope="session")
def gmm1d():
    return make_builtin_target("gmm1d")


@pytest.fixture(scope="session")
def gmm1d_model(gmm1d):
    return VpScoreModel(gmm1d)


@pytest.fixture(scope="session")
def two_uniform():
    return make_builtin_target("two_uniform")


@pytest.fixture(scope="session")
def std_normal():
    return make_builtin_target("gaussian", {"std": 1.0})


@pytest.fixture(scope="session")
def wide_normal():
    """N(0, 4) in one dimension, whose probability flow is linear."""
    return make_builtin_target("gaussian", {"std": 2.0})


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_VERDICTS = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_VERDICTS] = []


@pytest.fixture
def verdict(request):
    """Print and record one ``PASS``/``FAIL`` line for an acceptance criterion."""

    def record(number: int, ok: bool, detail: str) -> bool:
        line = f"{'PASS' if ok else 'FAIL'} criterion {number}: {detail}"
        request.config.stash[_VERDICTS].append(line)
        capture = request.config.pluginmanager.getplugin("capturemanager")
        with capture.global_and_fixture_disabled():
            print("\n" + line, flush=True)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_VERDICTS, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
