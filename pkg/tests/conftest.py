import numpy as np
import pytest

from gmlimits import maps

SEED = 20261015


@pytest.fixture(scope="session")
def markov2():
    m = maps.build_finite_markov([[0.9, 0.1], [0.2, 0.8]])
    return m, maps.depth_table(m, [1.0, -1.0])


@pytest.fixture(scope="session")
def coin():
    m = maps.build_finite_markov([[0.5, 0.5], [0.5, 0.5]])
    return m, maps.depth_table(m, [0.0, 1.0])


@pytest.fixture(scope="session")
def poly_q1():
    return maps.build_countable_bernoulli({"type": "polynomial", "q": 1.0}, truncation_tol=1e-6)


@pytest.fixture(scope="session")
def rng_np():
    return np.random.default_rng(SEED)


# criterion number -> (passed, detail), filled by test_acceptance.py
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k:>2}: {'PASS' if passed else 'FAIL'}  {detail}")
