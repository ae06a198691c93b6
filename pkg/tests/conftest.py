import numpy as np
import pytest

from slcrit import analyze, parse
from slcrit.critical import find_in_cm


@pytest.fixture(scope="session")
def f_quad():
    return parse("x^2/2")


@pytest.fixture(scope="session")
def f_zero():
    return parse("0")


@pytest.fixture(scope="session")
def f_cubic4():
    return parse("x^3 - 4*x")


@pytest.fixture(scope="session")
def f_exp():
    return parse("exp(x)")


@pytest.fixture(scope="session")
def report_quad(f_quad):
    return analyze(f_quad, -30.0, 30.0, 5)


@pytest.fixture(scope="session")
def member1(f_quad, report_quad):
    return find_in_cm(f_quad, 1, report_quad)


@pytest.fixture(scope="session")
def member2(f_quad, report_quad):
    return find_in_cm(f_quad, 2, report_quad)


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(20240817)
