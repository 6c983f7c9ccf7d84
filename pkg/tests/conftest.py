import numpy as np
import pytest

from topograd.config import benchmark_config
from topograd.mesh import InclusionShape, build_rect_mesh
from topograd.validation import Study


@pytest.fixture(scope="session")
def square():
    return build_rect_mesh((0, 1, 0, 1), 0.1)


@pytest.fixture(scope="session")
def square_fine():
    return build_rect_mesh((0, 1, 0, 1), 1 / 64)


@pytest.fixture(scope="session")
def disk_square():
    return build_rect_mesh((0, 1, 0, 1), 0.1, [InclusionShape.disk(0.1, center=(0.5, 0.5))])


@pytest.fixture(scope="session")
def bench_study():
    """Transmission benchmark shared by the validation and topo tests."""
    return Study(benchmark_config("transmission"))


@pytest.fixture(scope="session")
def extremal_study():
    return Study(benchmark_config("extremal"))


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


_ACCEPTANCE: list = []


@pytest.fixture(scope="session")
def acceptance_log():
    """Collects one line per acceptance criterion; printed in the terminal summary."""
    return _ACCEPTANCE


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(_ACCEPTANCE, key=lambda s: int(s.split()[1].rstrip(":"))):
        terminalreporter.write_line(line)
