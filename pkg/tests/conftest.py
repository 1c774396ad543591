import numpy as np
import pytest

from kvn.dictionary import MonomialTaperedSpec, build_monomial_tapered
from kvn.estimator import generators_from_gram, whiten
from kvn.reference import ANALYTIC_A, ANALYTIC_G
from kvn.systems import make_damped_oscillator, make_lotka_volterra, make_undamped_oscillator, sample_uniform


@pytest.fixture(scope="session")
def uo():
    return make_undamped_oscillator()


@pytest.fixture(scope="session")
def do():
    return make_damped_oscillator()


@pytest.fixture(scope="session")
def lv():
    return make_lotka_volterra()


@pytest.fixture(scope="session")
def uo_monomial(uo):
    return build_monomial_tapered(MonomialTaperedSpec(2, uo.law))


@pytest.fixture(scope="session")
def analytic_gen():
    return generators_from_gram(ANALYTIC_G, ANALYTIC_A)


@pytest.fixture(scope="session")
def analytic_white(analytic_gen):
    return whiten(analytic_gen)


@pytest.fixture(scope="session")
def interior_points():
    """1000 uniform interior points for each benchmark system."""

    def draw(sys, m=1000, seed=11):
        return sample_uniform(sys.domain, m, seed)

    return draw


def rel_fro(a, b):
    return np.linalg.norm(a - b) / np.linalg.norm(b)


# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE_LINES = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[n])
