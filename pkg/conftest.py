"""
Pytest configuration file for the vortex FMM package.
Contains fixtures and hooks for test execution.
"""

import numpy as np
import pytest

from fmm.model import ParticleSet
from utils.config_manager import get_config_manager
from utils.logger import get_logger
from utils.output_helper import OutputHelper


@pytest.fixture(scope="session")
def logger():
    """
    Session-scoped logger fixture.

    Returns:
        RunLogger: Logger instance
    """
    return get_logger()


@pytest.fixture(scope="session")
def acceptance():
    """
    Tolerances and reference constants from data/acceptance.json.

    Returns:
        dict: Acceptance dictionary
    """
    return get_config_manager().get_acceptance()


@pytest.fixture(scope="session")
def full_scale(request):
    """True when --full-scale asks for acceptance-size problems."""
    return request.config.getoption("--full-scale")


@pytest.fixture
def rng():
    """Seeded generator so every test is reproducible."""
    return np.random.default_rng(20240611)


@pytest.fixture
def random_cloud(request, logger):
    """
    Factory for random particle clouds in the cube [-half_width, half_width]^3.

    The last cloud built is kept on the test item so a failure can dump it.

    Yields:
        callable: (n, seed=0, half_width=pi, sigma=0.1) -> ParticleSet
    """
    logger.log_run_start(request.node.name)

    def make(n, seed=0, half_width=np.pi, sigma=0.1):
        gen = np.random.default_rng(seed)
        cloud = ParticleSet(gen.uniform(-half_width, half_width, size=(n, 3)), gen.standard_normal((n, 3)), sigma)
        request.node.failure_particles = cloud
        return cloud

    yield make
    logger.log_run_end(request.node.name)


@pytest.fixture
def output_dir(tmp_path):
    """Per-test output directory for run drivers."""
    path = tmp_path / "results"
    path.mkdir()
    return path


@pytest.hookimpl(tryfirst=True, hookwrapper=True)
def pytest_runtest_makereport(item, call):
    """
    Hook to dump the particle inputs of a failing test.
    """
    outcome = yield
    rep = outcome.get_result()

    if rep.when == "call" and rep.failed:
        try:
            particles = getattr(item, "failure_particles", None)
            error_message = str(call.excinfo.value) if call.excinfo else "Unknown error"
            OutputHelper("results/failures").capture_on_failure(item.name, error_message, particles)
        except Exception as e:
            print(f"Could not write failure dump: {str(e)}")


def pytest_addoption(parser):
    """
    Add custom command-line options.
    """
    parser.addoption(
        "--full-scale",
        action="store_true",
        default=False,
        help="Run acceptance tests at their full problem sizes"
    )


def pytest_configure(config):
    """
    Configure pytest with custom markers and settings.
    """
    config.addinivalue_line("markers", "smoke: mark test as smoke test")
    config.addinivalue_line("markers", "regression: mark test as regression test")
    config.addinivalue_line("markers", "critical: mark test as critical")
    config.addinivalue_line("markers", "slow: mark test as slow running")
    config.addinivalue_line("markers", "distributed: mark test as running several in-process ranks")
