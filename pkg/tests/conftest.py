import numpy as np
import pytest

from gqa.cloud import PointCloud
from gqa.shapes import make_reference


def brute_knn(points, q, k):
    d = np.sqrt(((points - q) ** 2).sum(axis=1))
    order = np.lexsort((np.arange(len(points)), d))
    return order[:k]


def brute_nn_other(points):
    out = np.empty(len(points))
    for i, p in enumerate(points):
        d = np.sqrt(((points - p) ** 2).sum(axis=1))
        d[i] = np.inf
        out[i] = d.min()
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def sphere5k():
    return make_reference("sphere", 5000, 3)


@pytest.fixture(scope="session")
def torus5k():
    return make_reference("torus", 5000, 5)


def random_cloud(rng, n=300):
    return PointCloud(rng.random((n, 3)))


# acceptance reporting: one line per criterion, echoed again in the summary
_ACCEPTANCE = []


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: desk-scale training experiments (tens of minutes)")


@pytest.fixture(scope="session")
def acceptance():
    def record(number, title, passed, detail):
        line = f"ACCEPTANCE {number:>2} {'PASS' if passed else 'FAIL'}  {title}: {detail}"
        _ACCEPTANCE.append((number, line))
        print(line)
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(_ACCEPTANCE):
            terminalreporter.write_line(line)
