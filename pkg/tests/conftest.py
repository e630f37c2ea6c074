import numpy as np
import pytest

from crlab.barrier import Barrier
from crlab.geometry import DefiningSystem, load_bundled
from crlab.poly import Poly


def quadric(signs, scale=1.0, name="quadric"):
    """Hypersurface ``x_1 + scale * sum_j signs[j] |z_{j+2}|^2 = 0`` in ``C^(len(signs)+1)``."""
    n = len(signs) + 1
    rho = Poly.x(n, 0)
    for j, s in enumerate(signs):
        zj = Poly.var(n, j + 1)
        rho = rho + zj * zj.conj() * (s * scale)
    return DefiningSystem(n, 1, [rho], name=name)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(scope="session")
def bundled():
    cache = {}

    def get(name):
        if name not in cache:
            cache[name] = load_bundled(name)
        return cache[name]

    return get


@pytest.fixture(scope="session")
def barriers(bundled):
    q = {"flat": 0, "hyperquadric": 1, "sig22": 2, "codim2": 1}
    cache = {}

    def get(name):
        if name not in cache:
            cache[name] = Barrier(bundled(name), q[name])
        return cache[name]

    return get


# one PASS/FAIL line per acceptance criterion, shown in the terminal summary
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[k])
