import numpy as np
import pytest

from nlgfem.mesh import MeshFamily


@pytest.fixture(scope="session")
def family():
    return MeshFamily()


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def pytest_terminal_summary(terminalreporter):
    import _criteria

    if _criteria.RESULTS:
        terminalreporter.section("acceptance criteria")
        for k in sorted(_criteria.RESULTS):
            terminalreporter.write_line(_criteria.RESULTS[k])
