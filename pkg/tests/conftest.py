import numpy as np
import pytest

from csiaug.core import RngStream
from csiaug.synth import EnvConfig, build_environment, make_dataset


@pytest.fixture(scope="session")
def small_env():
    cfg = EnvConfig(n_ap=3, n_rx=2, n_subcarriers=32, n_scatterers=20, los_enabled=False, noise_variance=1e-9, seed=5)
    return build_environment(cfg)


@pytest.fixture(scope="session")
def small_dataset(small_env):
    return make_dataset(small_env, ("random", 40), True, RngStream(11))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_configure(config):
    config._acceptance_lines = []


@pytest.fixture
def acceptance(request):
    """Record one summary line per acceptance criterion."""
    lines = request.config._acceptance_lines

    def record(number, passed, detail):
        line = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}"
        lines.append(line)
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "_acceptance_lines", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
